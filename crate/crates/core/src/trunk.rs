//! Frozen vision-transformer trunk and the encoder that interleaves it with
//! cross-branch attention.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::alignment::{lora_linear, lora_prefix, CrossAttnParams, LoraPair, LoraSet, ProjTarget, StageMaskHead};
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, sigmoid, softmax_last_dim, Conv2d, FeatureMap, Init, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_stages: usize,
    pub blocks_per_stage: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 16,
            embed_dim: 64,
            num_stages: 4,
            blocks_per_stage: 1,
            num_heads: 4,
            mlp_ratio: 2.0,
        }
    }
}

impl TrunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_stages == 0 || self.blocks_per_stage == 0 {
            return Err(Error::config("trunk needs at least one stage and one block per stage"));
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_blocks(&self) -> usize {
        self.num_stages * self.blocks_per_stage
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &TrunkConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let h = cfg.mlp_hidden();
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), d, false)?,
            q: Linear::new(store, &format!("{prefix}.attn.q"), d, d, true, false)?,
            k: Linear::new(store, &format!("{prefix}.attn.k"), d, d, true, false)?,
            v: Linear::new(store, &format!("{prefix}.attn.v"), d, d, true, false)?,
            o: Linear::new(store, &format!("{prefix}.attn.o"), d, d, true, false)?,
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), d, false)?,
            fc1: Linear::new(store, &format!("{prefix}.mlp.fc1"), d, h, true, false)?,
            fc2: Linear::new(store, &format!("{prefix}.mlp.fc2"), h, d, true, false)?,
        })
    }

    fn proj(&self, target: ProjTarget) -> &Linear {
        match target {
            ProjTarget::Q => &self.q,
            ProjTarget::K => &self.k,
            ProjTarget::V => &self.v,
            ProjTarget::O => &self.o,
        }
    }

    fn apply(&self, x: &Tensor, target: ProjTarget, pair: Option<&LoraPair>) -> Result<Tensor> {
        let p = self.proj(target);
        lora_linear(x, &p.weight, p.bias.as_ref(), pair)
    }

    fn forward(&self, x: &Tensor, heads: usize, lora: Option<&LoraSet>, block: usize) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / heads;
        let pair = |t| lora.and_then(|l| l.get(block, t));
        let h = self.ln1.forward(x)?;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, n, heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.apply(&h, ProjTarget::Q, pair(ProjTarget::Q))?)?;
        let k = split(self.apply(&h, ProjTarget::K, pair(ProjTarget::K))?)?;
        let v = split(self.apply(&h, ProjTarget::V, pair(ProjTarget::V))?)?;
        let logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = softmax_last_dim(&logits)?.matmul(&v)?;
        let attn = attn.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        let x = (x + self.apply(&attn, ProjTarget::O, pair(ProjTarget::O))?)?;
        let h = self.ln2.forward(&x)?;
        let h = self.fc2.forward(&self.fc1.forward(&h)?.gelu()?)?;
        Ok((x + h)?)
    }
}

/// Frozen trunk: patch stem, additive positional grid, attention blocks.
#[derive(Debug, Clone)]
pub struct Trunk {
    cfg: TrunkConfig,
    stem: Conv2d,
    pos: Tensor,
    blocks: Vec<Block>,
}

impl Trunk {
    pub fn new(store: &mut ParamStore, cfg: &TrunkConfig) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let stem = Conv2d::with_init(
            store,
            "trunk.patch_embed",
            [3, cfg.embed_dim, p, p, 0],
            Init::Normal {
                std: (1.0 / (3 * p * p) as f64).sqrt(),
            },
            Init::Zeros,
            false,
        )?;
        let g = cfg.grid();
        let pos = store.add("trunk.pos", &[1, cfg.embed_dim, g, g], Init::Normal { std: 0.5 }, false)?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks());
        for i in 0..cfg.num_blocks() {
            blocks.push(Block::new(store, &format!("trunk.block{i}"), cfg)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            pos,
            blocks,
        })
    }

    pub fn config(&self) -> &TrunkConfig {
        &self.cfg
    }

    pub fn stage_stride(&self) -> usize {
        self.cfg.patch_size
    }

    /// Patch embedding without the positional grid: `[B, 3, S, S]` ->
    /// `[B, embed_dim, S/p, S/p]`.
    pub fn patch_embed(&self, image: &Tensor) -> Result<FeatureMap> {
        let (_, c, h, w) = image.dims4()?;
        let s = self.cfg.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::config(format!(
                "trunk expects a 3x{s}x{s} image, got {c}x{h}x{w}"
            )));
        }
        Ok(FeatureMap::new(self.stem.forward(image)?, 0, self.cfg.patch_size))
    }

    /// Patch embedding plus positional grid.
    pub fn embed(&self, image: &Tensor) -> Result<FeatureMap> {
        let fm = self.patch_embed(image)?;
        let data = fm.data.broadcast_add(&self.pos)?;
        Ok(FeatureMap::new(data, 0, self.cfg.patch_size))
    }

    /// Runs the attention blocks of one stage (0-based) with optional LoRA.
    pub fn trunk_stage(&self, x: &FeatureMap, stage: usize, lora: Option<&LoraSet>) -> Result<FeatureMap> {
        if stage >= self.cfg.num_stages {
            return Err(Error::config(format!(
                "stage {stage} out of range for {} stages",
                self.cfg.num_stages
            )));
        }
        if x.channels() != self.cfg.embed_dim {
            return Err(Error::config(format!(
                "trunk stage expects {} channels, got {}",
                self.cfg.embed_dim,
                x.channels()
            )));
        }
        let (h, w) = (x.height(), x.width());
        let mut t = x.tokens()?;
        let bps = self.cfg.blocks_per_stage;
        for bi in stage * bps..(stage + 1) * bps {
            t = self.blocks[bi].forward(&t, self.cfg.num_heads, lora, bi)?;
            ensure_finite(&t, &format!("trunk block {bi}"))?;
        }
        FeatureMap::from_tokens(&t, h, w, x.scale_index, x.stride)
    }

    /// Plain trunk forward, no adapters, no interaction.
    pub fn forward(&self, image: &Tensor, lora: Option<&LoraSet>) -> Result<FeatureMap> {
        let mut x = self.embed(image)?;
        for s in 0..self.cfg.num_stages {
            x = self.trunk_stage(&x, s, lora)?;
        }
        Ok(x)
    }
}

/// Creates one LoRA pair per (block, target) for the trunk's projections.
pub fn attach_lora(store: &mut ParamStore, cfg: &TrunkConfig, targets: &[ProjTarget], rank: usize, alpha: f64) -> Result<LoraSet> {
    if rank == 0 {
        return Err(Error::config("LoRA rank must be at least 1"));
    }
    let mut set = LoraSet::empty();
    let d = cfg.embed_dim;
    let mut targets = targets.to_vec();
    targets.sort();
    targets.dedup();
    for stage in 0..cfg.num_stages {
        for b in 0..cfg.blocks_per_stage {
            let block = stage * cfg.blocks_per_stage + b;
            for &t in &targets {
                let prefix = lora_prefix(stage + 1, b, cfg.blocks_per_stage, t);
                set.insert(block, t, LoraPair::new(store, &prefix, d, d, rank, alpha)?);
            }
        }
    }
    Ok(set)
}

/// Per-stage record of trunk features, injected adapter features, the fused
/// output and the stage's predicted foreground probability.
#[derive(Debug, Clone)]
pub struct StageBundle {
    /// 1-based.
    pub stage_index: usize,
    pub f_v: FeatureMap,
    pub f_u: FeatureMap,
    pub fused: FeatureMap,
    pub stage_logits: Tensor,
    pub stage_mask: Tensor,
}

/// Trunk plus the trainable pieces that live alongside it.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub trunk: Trunk,
    pub lora: LoraSet,
    pub cross: Vec<CrossAttnParams>,
    pub heads: Vec<StageMaskHead>,
    pub interaction: bool,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &TrunkConfig,
        lora: LoraSet,
        adapter_channels: usize,
        cross_dim: usize,
        interaction: bool,
    ) -> Result<Self> {
        let trunk = Trunk::new(store, cfg)?;
        let mut cross = Vec::new();
        let mut heads = Vec::new();
        for s in 1..=cfg.num_stages {
            if interaction {
                cross.push(CrossAttnParams::new(
                    store,
                    &format!("cross.{s}"),
                    cfg.embed_dim,
                    adapter_channels,
                    cross_dim,
                )?);
            }
            heads.push(StageMaskHead::new(store, &format!("stage_head.{s}"), cfg.embed_dim)?);
        }
        Ok(Self {
            trunk,
            lora,
            cross,
            heads,
            interaction,
        })
    }

    pub fn encode(&self, image: &Tensor, adapter_feats: &[FeatureMap], masks: &[Tensor]) -> Result<Vec<StageBundle>> {
        let x = self.trunk.embed(image)?;
        self.encode_embedded(&x, adapter_feats, masks)
    }

    /// Stage `s`: trunk blocks, then mask-gated cross attention against
    /// `adapter_feats[s]` with gate `masks[s]`.
    pub fn encode_embedded(&self, embedded: &FeatureMap, adapter_feats: &[FeatureMap], masks: &[Tensor]) -> Result<Vec<StageBundle>> {
        let n = self.trunk.cfg.num_stages;
        if adapter_feats.len() != n || masks.len() != n {
            return Err(Error::config(format!(
                "encode needs {n} adapter features and {n} masks, got {} and {}",
                adapter_feats.len(),
                masks.len()
            )));
        }
        let lora = if self.lora.is_empty() { None } else { Some(&self.lora) };
        let mut x = embedded.clone();
        let mut out = Vec::with_capacity(n);
        for s in 0..n {
            let f_v = self.trunk.trunk_stage(&x, s, lora)?;
            let fused = if self.interaction {
                self.cross[s].forward(&f_v, &adapter_feats[s], &masks[s])?
            } else {
                f_v.clone()
            };
            let stage_logits = self.heads[s].logits(&fused)?;
            let stage_mask = sigmoid(&stage_logits)?;
            out.push(StageBundle {
                stage_index: s + 1,
                f_v,
                f_u: adapter_feats[s].clone(),
                fused: fused.clone(),
                stage_logits,
                stage_mask,
            });
            x = fused;
        }
        Ok(out)
    }
}
