//! Full model: adapter, LoRA-adapted trunk with cross-branch attention,
//! learned mask prompt and hierarchical decoder.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::alignment::{LoraPair, ProjTarget};
use crate::checkpoint::{load_tensors, save_tensors};
use crate::decoder::{ConsistencyDecoder, DecoderConfig, DecoderGeometry, DecoderOutput, PlainHead};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossWeights, TotalLoss};
use crate::nn::{resample, sigmoid, FeatureMap, ParamStore, Resample};
use crate::prompt::{PromptHead, PromptMask};
use crate::trunk::{attach_lora, Encoder, StageBundle, TrunkConfig};
use crate::uscaling::{AdapterStack, UScalingConfig};

pub const MODEL_FILE: &str = "model.json";
pub const PARAMS_FILE: &str = "params.bin";

/// Where LoRA factors are attached. The trunk is frozen either way; a
/// decoder without LoRA is fine-tuned in full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraPlacement {
    /// Frozen encoder, fully fine-tuned decoder.
    Frozen,
    /// Frozen encoder, LoRA on the decoder token MLP.
    DecoderOnly,
    /// LoRA encoder, fully fine-tuned decoder.
    EncoderOnly,
    Both,
}

impl LoraPlacement {
    pub const ALL: [LoraPlacement; 4] = [
        LoraPlacement::Frozen,
        LoraPlacement::DecoderOnly,
        LoraPlacement::EncoderOnly,
        LoraPlacement::Both,
    ];

    pub fn encoder(self) -> bool {
        matches!(self, LoraPlacement::EncoderOnly | LoraPlacement::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, LoraPlacement::DecoderOnly | LoraPlacement::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<ProjTarget>,
    pub placement: LoraPlacement,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            targets: vec![ProjTarget::Q, ProjTarget::V],
            placement: LoraPlacement::Both,
        }
    }
}

/// Component switches for the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub lora: bool,
    pub multiscale: bool,
    pub interaction: bool,
    pub decoder: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            lora: true,
            multiscale: true,
            interaction: true,
            decoder: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub trunk: TrunkConfig,
    pub adapter: UScalingConfig,
    /// Stride of the adapter stem; the adapter grid is `image_size / stride`.
    pub adapter_stride: usize,
    pub cross_dim: usize,
    pub decoder: DecoderConfig,
    pub lora: LoraConfig,
    pub components: Components,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            trunk: TrunkConfig::default(),
            adapter: UScalingConfig::default(),
            adapter_stride: 4,
            cross_dim: 64,
            decoder: DecoderConfig::default(),
            lora: LoraConfig::default(),
            components: Components::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        self.adapter.validate()?;
        if self.adapter.num_modules != self.trunk.num_stages {
            return Err(Error::config(format!(
                "adapter has {} modules but the trunk has {} stages",
                self.adapter.num_modules, self.trunk.num_stages
            )));
        }
        let s = self.trunk.image_size;
        if self.adapter_stride == 0 || !s.is_multiple_of(self.adapter_stride) {
            return Err(Error::config(format!(
                "image_size {s} is not divisible by adapter_stride {}",
                self.adapter_stride
            )));
        }
        let ag = self.adapter_grid();
        let div = if self.components.multiscale { self.adapter.required_divisor() } else { 1 };
        if !ag.is_multiple_of(div) {
            return Err(Error::config(format!("adapter grid {ag} is not divisible by {div}")));
        }
        if self.lora_active() {
            let max = self.trunk.embed_dim.min(self.decoder.width);
            if self.lora.rank == 0 || (self.decoder_lora_active() && self.lora.rank > max) {
                return Err(Error::config(format!("LoRA rank {} is out of range", self.lora.rank)));
            }
            if self.lora.targets.is_empty() && self.trunk_lora_active() {
                return Err(Error::config("LoRA needs at least one projection target"));
            }
        }
        Ok(())
    }

    pub fn adapter_grid(&self) -> usize {
        self.trunk.image_size / self.adapter_stride
    }

    pub fn lora_active(&self) -> bool {
        self.trunk_lora_active() || self.decoder_lora_active()
    }

    pub fn trunk_lora_active(&self) -> bool {
        self.components.lora && self.lora.placement.encoder()
    }

    pub fn decoder_lora_active(&self) -> bool {
        self.components.lora && self.components.decoder && self.lora.placement.decoder()
    }

    pub fn n_masks(&self) -> usize {
        self.trunk.num_stages + 1
    }

    pub fn decoder_geometry(&self) -> DecoderGeometry {
        DecoderGeometry {
            trunk_dim: self.trunk.embed_dim,
            adapter_channels: self.adapter.channels,
            token_grid: self.trunk.grid(),
            adapter_grid: self.adapter_grid(),
            image_size: self.trunk.image_size,
        }
    }
}

/// Parameter counts split by whether the optimizer updates them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub frozen: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }

    /// Trainable parameters in millions.
    pub fn learnable_millions(&self) -> f64 {
        self.trainable as f64 / 1e6
    }
}

/// Parameter counts derived from the configuration alone.
pub fn analytic_param_count(cfg: &ModelConfig) -> ParamCount {
    let t = &cfg.trunk;
    let (d, p, g, hm) = (t.embed_dim, t.patch_size, t.grid(), t.mlp_hidden());
    let blocks = t.num_blocks();
    let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
    let up = |ci: usize, co: usize| ci * co * 4 + co;
    let lin = |i: usize, o: usize| i * o + o;

    let mut frozen = conv(3, d, p) + d * g * g + blocks * (4 * d + 4 * lin(d, d) + lin(d, hm) + lin(hm, d));
    let mut trainable = 0;

    let c = cfg.adapter.channels;
    let scales = if cfg.components.multiscale { cfg.adapter.num_scales } else { 1 };
    let module = scales * (2 * conv(c, c, 3) + conv(c, c, 1)) + (scales - 1) * conv(c, c, 3) + 1;
    trainable += conv(3, c, 3) + cfg.adapter.num_modules * module;

    if cfg.trunk_lora_active() {
        let mut targets = cfg.lora.targets.clone();
        targets.sort();
        targets.dedup();
        trainable += blocks * targets.len() * 2 * cfg.lora.rank * d;
    }
    let dc = cfg.cross_dim;
    if cfg.components.interaction {
        trainable += t.num_stages * (d * dc + 2 * c * dc + if dc != d { dc * d } else { 0 });
    }
    trainable += t.num_stages * (d + 1);
    trainable += t.num_stages + 2;

    if cfg.components.decoder {
        let w = cfg.decoder.width;
        let h = cfg.decoder.mlp_hidden;
        let geom = cfg.decoder_geometry();
        let steps_in = (geom.adapter_grid / geom.token_grid).trailing_zeros() as usize;
        let steps_out = (geom.image_size / geom.adapter_grid).trailing_zeros() as usize;
        let ladder = |ci: usize, steps: usize| if steps == 0 { 0 } else { up(ci, w) + (steps - 1) * up(w, w) };
        let fv_ch = if steps_in == 0 { d } else { w };
        trainable += 2 * ladder(d, steps_in) + conv(c, w, 3) + conv(2 * fv_ch + w + 1, w, 3) + ladder(w, steps_out);
        trainable += 2 * conv(w, 1, 1);
        let mlp = lin(d, h) + lin(h, h) + lin(h, w);
        if cfg.decoder_lora_active() {
            frozen += mlp;
            trainable += cfg.lora.rank * ((d + h) + (h + h) + (h + w));
        } else {
            trainable += mlp;
        }
    } else {
        trainable += conv(d, 1, 1);
    }
    ParamCount { trainable, frozen }
}

#[derive(Debug, Clone)]
enum Head {
    Hierarchical(Box<ConsistencyDecoder>),
    Plain(PlainHead),
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub seg_logits: Tensor,
    /// Quarter-resolution deep-supervision logits.
    pub aux_logits: Tensor,
    pub bundles: Vec<StageBundle>,
    pub prompt_logits: Tensor,
    pub prompt: PromptMask,
}

impl ModelOutput {
    pub fn probability(&self) -> Result<Tensor> {
        sigmoid(&self.seg_logits)
    }

    /// Stage probabilities followed by the soft fused prompt.
    pub fn mask_predictions(&self) -> Vec<Tensor> {
        let mut v: Vec<Tensor> = self.bundles.iter().map(|b| b.stage_mask.clone()).collect();
        v.push(self.prompt.soft.clone());
        v
    }

    pub fn loss(&self, gt: &Tensor, w: &LossWeights) -> Result<TotalLoss> {
        total_loss(
            &self.probability()?,
            &sigmoid(&self.aux_logits)?,
            &self.mask_predictions(),
            gt,
            w,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    config: ModelConfig,
    seed: u64,
    dtype: String,
}

#[derive(Debug)]
pub struct UrbanSam {
    cfg: ModelConfig,
    seed: u64,
    store: ParamStore,
    adapter: AdapterStack,
    encoder: Encoder,
    prompt: PromptHead,
    head: Head,
    decoder_lora: Vec<LoraPair>,
}

/// `[0, 255]` pixel values to the normalized network input.
pub fn normalize_pixel(v: f64) -> f64 {
    (v / 255.0 - 0.5) / 0.25
}

/// Stacks `[3, S, S]` images (values in `[0, 255]`) into a normalized batch.
pub fn images_to_tensor(images: &[&Array3<f64>], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::validation("empty image batch"))?;
    let dims = first.dim();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for im in images {
        if im.dim() != dims {
            return Err(Error::validation(format!("image {:?} differs from {:?} in batch", im.dim(), dims)));
        }
        data.extend(im.iter().map(|v| normalize_pixel(*v)));
    }
    let t = Tensor::from_vec(data, (images.len(), dims.0, dims.1, dims.2), &Device::Cpu)?;
    Ok(t.to_dtype(dtype)?)
}

/// Stacks `{0, 1}` masks into `[B, 1, H, W]`.
pub fn masks_to_tensor(masks: &[&Array2<u8>], dtype: DType) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::validation("empty mask batch"))?;
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.dim() != (h, w) {
            return Err(Error::validation(format!("mask {:?} differs from {:?} in batch", m.dim(), (h, w))));
        }
        data.extend(m.iter().map(|v| *v as f64));
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `[B, 1, H, W]` -> one `H × W` array per sample.
pub fn tensor_to_maps(t: &Tensor) -> Result<Vec<Array2<f64>>> {
    let (b, _, h, w) = t.dims4()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..b)
        .map(|i| Array2::from_shape_vec((h, w), v[i * h * w..(i + 1) * h * w].to_vec()).expect("map shape"))
        .collect())
}

impl UrbanSam {
    pub fn new(cfg: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let adapter = AdapterStack::new(&mut store, &cfg.adapter, cfg.adapter_stride, cfg.components.multiscale)?;
        let lora = if cfg.trunk_lora_active() {
            attach_lora(&mut store, &cfg.trunk, &cfg.lora.targets, cfg.lora.rank, cfg.lora.alpha)?
        } else {
            crate::alignment::LoraSet::empty()
        };
        let encoder = Encoder::new(
            &mut store,
            &cfg.trunk,
            lora,
            cfg.adapter.channels,
            cfg.cross_dim,
            cfg.components.interaction,
        )?;
        let prompt = PromptHead::new(&mut store, cfg.trunk.num_stages)?;
        let mut decoder_lora = Vec::new();
        let head = if cfg.components.decoder {
            let dec = ConsistencyDecoder::new(&mut store, &cfg.decoder, cfg.decoder_geometry(), !cfg.decoder_lora_active())?;
            if cfg.decoder_lora_active() {
                for (i, layer) in dec.mlp_layers().iter().enumerate() {
                    decoder_lora.push(LoraPair::new(
                        &mut store,
                        &format!("decoder.lora.mlp.{i}"),
                        layer.in_dim(),
                        layer.out_dim(),
                        cfg.lora.rank,
                        cfg.lora.alpha,
                    )?);
                }
            }
            Head::Hierarchical(Box::new(dec))
        } else {
            Head::Plain(PlainHead::new(&mut store, cfg.trunk.embed_dim, cfg.trunk.image_size)?)
        };
        Ok(Self {
            cfg,
            seed,
            store,
            adapter,
            encoder,
            prompt,
            head,
            decoder_lora,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn adapter(&self) -> &AdapterStack {
        &self.adapter
    }

    pub fn prompt_head(&self) -> &PromptHead {
        &self.prompt
    }

    pub fn param_count(&self) -> ParamCount {
        let trainable = self.store.num_trainable();
        ParamCount {
            trainable,
            frozen: self.store.num_total() - trainable,
        }
    }

    pub fn trunk_checksum(&self) -> Result<u64> {
        self.store.frozen_checksum()
    }

    /// Adapter module outputs area-pooled to the token grid.
    fn exports(&self, modules: &[(FeatureMap, crate::uscaling::ScalePyramid)]) -> Result<Vec<FeatureMap>> {
        let g = self.cfg.trunk.grid();
        let stride = self.cfg.trunk.patch_size;
        modules
            .iter()
            .map(|(fm, _)| {
                Ok(FeatureMap::new(
                    resample(&fm.data, g, g, Resample::Area)?,
                    fm.scale_index,
                    stride,
                ))
            })
            .collect()
    }

    /// Two passes through the encoder: the first with open gates (m ≡ 1)
    /// yields the stage masks that gate the second.
    pub fn forward(&self, images: &Tensor) -> Result<ModelOutput> {
        self.run(images, None)
    }

    /// Single pass with an external prompt `[B, 1, S, S]` in `[0, 1]` used
    /// as every stage gate and as the decoder's prompt mask.
    pub fn forward_with_prompt(&self, images: &Tensor, prompt: &Tensor) -> Result<ModelOutput> {
        self.run(images, Some(prompt))
    }

    fn run(&self, images: &Tensor, external: Option<&Tensor>) -> Result<ModelOutput> {
        let g = self.cfg.trunk.grid();
        let n = self.cfg.trunk.num_stages;
        let b = images.dims4()?.0;
        let adapter_out = self.adapter.forward(images)?;
        let exports = self.exports(&adapter_out.modules)?;
        let embedded = self.encoder.trunk.embed(images)?;

        let gates: Vec<Tensor> = match external {
            Some(p) => {
                let pg = resample(&p.to_dtype(self.dtype())?, g, g, Resample::Area)?;
                vec![pg; n]
            }
            None if self.cfg.components.interaction => {
                let open = Tensor::ones((b, 1, g, g), self.dtype(), images.device())?;
                let first = self.encoder.encode_embedded(&embedded, &exports, &vec![open; n])?;
                first.into_iter().map(|s| s.stage_mask).collect()
            }
            None => vec![Tensor::ones((b, 1, g, g), self.dtype(), images.device())?; n],
        };
        let bundles = self.encoder.encode_embedded(&embedded, &exports, &gates)?;
        let stage_masks: Vec<Tensor> = bundles.iter().map(|s| s.stage_mask.clone()).collect();
        let prompt_logits = self.prompt.fuse_stage_masks(&stage_masks)?;
        let prompt = self.prompt.binarize(&prompt_logits)?;

        let last = bundles.last().expect("at least one stage");
        let out: DecoderOutput = match &self.head {
            Head::Hierarchical(dec) => {
                let f_u = &adapter_out.modules.last().expect("at least one module").0;
                let m_pre = match external {
                    Some(p) => p.to_dtype(self.dtype())?,
                    None => prompt.straight_through.clone(),
                };
                let weights = if self.decoder_lora.is_empty() {
                    dec.mlp_token_weights(&last.fused)?
                } else {
                    let l = &self.decoder_lora;
                    dec.mlp_token_weights_with(&last.fused, [Some(&l[0]), Some(&l[1]), Some(&l[2])])?
                };
                dec.decode_with_weights(&bundles[0].fused, f_u, &m_pre, &last.fused, &weights)?
            }
            Head::Plain(h) => h.decode(&last.fused)?,
        };
        Ok(ModelOutput {
            seg_logits: out.seg_logits,
            aux_logits: out.aux_logits,
            bundles,
            prompt_logits,
            prompt,
        })
    }

    /// Foreground probabilities for a batch of `[3, S, S]` images.
    pub fn predict_maps(&self, images: &[&Array3<f64>]) -> Result<Vec<Array2<f64>>> {
        let x = images_to_tensor(images, self.dtype())?;
        tensor_to_maps(&self.forward(&x)?.probability()?)
    }

    pub fn param_tensors(&self) -> BTreeMap<String, Tensor> {
        self.store
            .entries()
            .iter()
            .map(|(k, e)| (k.clone(), e.var.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `tensors`; all must be present.
    pub fn load_params(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in self.store.entries().keys() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::data(format!("checkpoint is missing parameter `{name}`")))?;
            self.store.set(name, t)?;
        }
        Ok(())
    }

    /// Writes `model.json`, `params.bin` and the manifest, plus any extra
    /// tensor groups (e.g. optimizer state).
    pub fn save(&self, dir: &Path, extra: Vec<(&str, BTreeMap<String, Tensor>)>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = ModelFile {
            config: self.cfg.clone(),
            seed: self.seed,
            dtype: format!("{:?}", self.dtype()).to_lowercase(),
        };
        let path = dir.join(MODEL_FILE);
        fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(path, e))?;
        let mut groups = vec![(PARAMS_FILE, self.param_tensors())];
        groups.extend(extra);
        save_tensors(dir, &groups)
    }

    /// Rebuilds the model from a checkpoint directory. Returns the model and
    /// every tensor in the manifest so callers can pick up extra groups.
    pub fn load(dir: &Path) -> Result<(Self, BTreeMap<String, Tensor>)> {
        let path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ModelFile = serde_json::from_str(&text)?;
        let dtype = match meta.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(Error::data(format!("{}: unsupported dtype `{other}`", path.display()))),
        };
        let model = Self::new(meta.config, dtype, meta.seed)?;
        let tensors = load_tensors(dir)?;
        model.load_params(&tensors)?;
        Ok((model, tensors))
    }
}
