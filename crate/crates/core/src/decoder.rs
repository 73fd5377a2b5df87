//! Hierarchical consistency decoder.
//!
//! Trunk features are lifted to the adapter grid by a ladder of ×2
//! transposed convolutions, fused with the adapter features and the prompt
//! mask, and lifted again to full resolution. A three-layer MLP over the
//! final trunk tokens produces per-token channel weights in `[0, 1]` that
//! gate the full-resolution features before the 1×1 reduction to logits.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{resample, sigmoid, upsample_nearest, Conv2d, ConvTranspose2x, FeatureMap, Linear, ParamStore, Resample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Channel width of every fused feature and of the MLP token weights.
    pub width: usize,
    pub mlp_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: 16,
            mlp_hidden: 32,
        }
    }
}

/// Geometry the decoder is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderGeometry {
    pub trunk_dim: usize,
    pub adapter_channels: usize,
    pub token_grid: usize,
    pub adapter_grid: usize,
    pub image_size: usize,
}

fn ladder_steps(from: usize, to: usize, what: &str) -> Result<usize> {
    if from == 0 || to < from || !to.is_multiple_of(from) || !(to / from).is_power_of_two() {
        return Err(Error::config(format!(
            "{what}: cannot reach {to} from {from} by x2 steps"
        )));
    }
    Ok((to / from).trailing_zeros() as usize)
}

#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h1: Tensor,
    pub h2: Tensor,
    pub h3: Tensor,
    pub token_weights: Tensor,
    /// Full-resolution features before gating.
    pub full: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub seg_logits: Tensor,
    pub aux_logits: Tensor,
    pub state: Option<DecoderState>,
}

#[derive(Debug, Clone)]
pub struct ConsistencyDecoder {
    geom: DecoderGeometry,
    up_fv: Vec<ConvTranspose2x>,
    conv_fu: Conv2d,
    up_mfv: Vec<ConvTranspose2x>,
    fuse: Conv2d,
    up_out: Vec<ConvTranspose2x>,
    mlp: [Linear; 3],
    pub reduce: Conv2d,
    aux: Conv2d,
}

impl ConsistencyDecoder {
    /// `mlp_trainable = false` freezes the token MLP (used when LoRA is
    /// placed on the decoder instead).
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, geom: DecoderGeometry, mlp_trainable: bool) -> Result<Self> {
        let w = cfg.width;
        let steps_in = ladder_steps(geom.token_grid, geom.adapter_grid, "decoder trunk ladder")?;
        let steps_out = ladder_steps(geom.adapter_grid, geom.image_size, "decoder output ladder")?;
        let ladder = |store: &mut ParamStore, name: &str, c_in: usize, steps: usize| -> Result<Vec<ConvTranspose2x>> {
            (0..steps)
                .map(|i| ConvTranspose2x::new(store, &format!("{name}{i}"), if i == 0 { c_in } else { w }, w, true))
                .collect()
        };
        let up_fv = ladder(store, "decoder.up_fv", geom.trunk_dim, steps_in)?;
        let conv_fu = Conv2d::new(store, "decoder.conv_fu", geom.adapter_channels, w, 3, 1, 1, true)?;
        let up_mfv = ladder(store, "decoder.up_mfv", geom.trunk_dim, steps_in)?;
        let fv_ch = if steps_in == 0 { geom.trunk_dim } else { w };
        let fuse = Conv2d::new(store, "decoder.fuse", 2 * fv_ch + w + 1, w, 3, 1, 1, true)?;
        let up_out = ladder(store, "decoder.up_out", w, steps_out)?;
        let mlp = [
            Linear::new(store, "decoder.mlp.0", geom.trunk_dim, cfg.mlp_hidden, true, mlp_trainable)?,
            Linear::new(store, "decoder.mlp.1", cfg.mlp_hidden, cfg.mlp_hidden, true, mlp_trainable)?,
            Linear::new(store, "decoder.mlp.2", cfg.mlp_hidden, w, true, mlp_trainable)?,
        ];
        let reduce = Conv2d::new(store, "decoder.reduce", w, 1, 1, 1, 0, true)?;
        let aux = Conv2d::new(store, "decoder.aux", w, 1, 1, 1, 0, true)?;
        Ok(Self {
            geom,
            up_fv,
            conv_fu,
            up_mfv,
            fuse,
            up_out,
            mlp,
            reduce,
            aux,
        })
    }

    pub fn geometry(&self) -> DecoderGeometry {
        self.geom
    }

    pub fn mlp_layers(&self) -> &[Linear; 3] {
        &self.mlp
    }

    /// Per-token channel weights `[B, width, g, g]`, all in `[0, 1]`.
    pub fn mlp_token_weights(&self, m_fv: &FeatureMap) -> Result<Tensor> {
        self.mlp_token_weights_with(m_fv, [None, None, None])
    }

    /// Same as [`Self::mlp_token_weights`] with optional per-layer LoRA deltas.
    pub fn mlp_token_weights_with(&self, m_fv: &FeatureMap, lora: [Option<&crate::alignment::LoraPair>; 3]) -> Result<Tensor> {
        let (b, _, h, w) = m_fv.data.dims4()?;
        let mut t = m_fv.tokens()?;
        for (i, layer) in self.mlp.iter().enumerate() {
            t = crate::alignment::lora_linear(&t, &layer.weight, layer.bias.as_ref(), lora[i])?;
            if i < 2 {
                t = t.relu()?;
            }
        }
        let t = sigmoid(&t)?;
        let c = t.dims()[2];
        Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
    }

    pub fn decode(&self, f_v: &FeatureMap, f_u: &FeatureMap, m_pre: &Tensor, m_fv: &FeatureMap) -> Result<DecoderOutput> {
        let weights = self.mlp_token_weights(m_fv)?;
        self.decode_with_weights(f_v, f_u, m_pre, m_fv, &weights)
    }

    pub fn decode_with_weights(
        &self,
        f_v: &FeatureMap,
        f_u: &FeatureMap,
        m_pre: &Tensor,
        m_fv: &FeatureMap,
        token_weights: &Tensor,
    ) -> Result<DecoderOutput> {
        let g = &self.geom;
        let ag = g.adapter_grid;
        let check = |name: &str, t: &Tensor, hw: usize| -> Result<()> {
            let (_, _, h, w) = t.dims4()?;
            if h != hw || w != hw {
                return Err(Error::validation(format!(
                    "decoder: {name} is {h}x{w}, expected {hw}x{hw} (shapes {:?})",
                    t.dims()
                )));
            }
            Ok(())
        };
        check("f_v", &f_v.data, g.token_grid)?;
        check("m_fv", &m_fv.data, g.token_grid)?;
        check("f_u", &f_u.data, ag)?;

        let climb = |x: &Tensor, ladder: &[ConvTranspose2x]| -> Result<Tensor> {
            let mut x = x.clone();
            for up in ladder {
                x = up.forward(&x)?.relu()?;
            }
            Ok(x)
        };
        let fv_up = climb(&f_v.data, &self.up_fv)?;
        let fu_c = self.conv_fu.forward(&f_u.data)?.relu()?;
        let h1 = Tensor::cat(&[&fv_up, &fu_c], 1)?;
        let mfv_up = climb(&m_fv.data, &self.up_mfv)?;
        let h2 = Tensor::cat(&[&h1, &mfv_up], 1)?;
        let pre = resample(m_pre, ag, ag, Resample::Bilinear)?;
        let h3 = Tensor::cat(&[&fv_up, &fu_c, &pre, &mfv_up], 1)?;

        let fused = self.fuse.forward(&h3)?.relu()?;
        let full = climb(&fused, &self.up_out)?;
        let s = g.image_size;
        let tg = g.token_grid;
        let gate = upsample_nearest(token_weights, s / tg, s / tg)?;
        let seg_logits = self.reduce.forward(&(&full * &gate)?)?;
        let aux_logits = resample(&self.aux.forward(&fused)?, s / 4, s / 4, Resample::Area)?;
        Ok(DecoderOutput {
            seg_logits,
            aux_logits,
            state: Some(DecoderState {
                h1,
                h2,
                h3,
                token_weights: token_weights.clone(),
                full,
            }),
        })
    }
}

/// Replacement head for the decoder ablation: 1×1 projection of the final
/// trunk tokens, bilinearly resized.
#[derive(Debug, Clone)]
pub struct PlainHead {
    proj: Conv2d,
    image_size: usize,
}

impl PlainHead {
    pub fn new(store: &mut ParamStore, trunk_dim: usize, image_size: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(store, "plain_head.proj", trunk_dim, 1, 1, 1, 0, true)?,
            image_size,
        })
    }

    pub fn decode(&self, m_fv: &FeatureMap) -> Result<DecoderOutput> {
        let logits = self.proj.forward(&m_fv.data)?;
        let s = self.image_size;
        Ok(DecoderOutput {
            seg_logits: resample(&logits, s, s, Resample::Bilinear)?,
            aux_logits: resample(&logits, s / 4, s / 4, Resample::Bilinear)?,
            state: None,
        })
    }
}
