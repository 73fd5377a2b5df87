//! Invariance transfer into the frozen trunk: low-rank adapters on the
//! attention projections and the mask-gated cross-branch attention that
//! injects adapter features into trunk tokens.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear, resample, scalar_f64, softmax_last_dim, FeatureMap, Init, ParamStore, Resample};

/// Attention projection a LoRA pair can be attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProjTarget {
    Q,
    K,
    V,
    O,
}

impl ProjTarget {
    pub const ALL: [ProjTarget; 4] = [ProjTarget::Q, ProjTarget::K, ProjTarget::V, ProjTarget::O];

    pub fn key(self) -> &'static str {
        match self {
            ProjTarget::Q => "q",
            ProjTarget::K => "k",
            ProjTarget::V => "v",
            ProjTarget::O => "o",
        }
    }
}

impl fmt::Display for ProjTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key().to_uppercase())
    }
}

impl FromStr for ProjTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q" => Ok(ProjTarget::Q),
            "k" => Ok(ProjTarget::K),
            "v" => Ok(ProjTarget::V),
            "o" => Ok(ProjTarget::O),
            _ => Err(Error::config(format!(
                "unknown projection target `{s}`; valid targets are Q, K, V, O"
            ))),
        }
    }
}

/// Low-rank factors attached to one frozen projection.
///
/// The effective weight delta is `(alpha / rank) · B·A`; `A` starts Gaussian
/// and `B` starts at exactly zero, so the delta is zero until training moves `B`.
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraPair {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("LoRA rank must be at least 1"));
        }
        if rank > d_in.min(d_out) {
            return Err(Error::config(format!(
                "LoRA rank {rank} exceeds min(in_dim, out_dim) = {}",
                d_in.min(d_out)
            )));
        }
        let a = store.add(
            &format!("{prefix}.A"),
            &[rank, d_in],
            Init::Normal {
                std: (1.0 / d_in as f64).sqrt(),
            },
            true,
        )?;
        let b = store.add(&format!("{prefix}.B"), &[d_out, rank], Init::Zeros, true)?;
        Ok(Self { a, b, rank, alpha })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha/rank) · B·(A·x)` over the last dimension of `x`.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        let ax = linear(x, &self.a, None)?;
        Ok((linear(&ax, &self.b, None)? * self.scale())?)
    }
}

/// `y = W·x + b + (alpha/rank)·B·(A·x)`; `W` and `b` are frozen handles.
pub fn lora_linear(x: &Tensor, w_frozen: &Tensor, bias: Option<&Tensor>, pair: Option<&LoraPair>) -> Result<Tensor> {
    let y = linear(x, w_frozen, bias)?;
    match pair {
        None => Ok(y),
        Some(p) => {
            let (d_out, d_in) = w_frozen.dims2()?;
            let (pr, pa_in) = p.a.dims2()?;
            let (pb_out, pb_r) = p.b.dims2()?;
            if pa_in != d_in || pb_out != d_out || pr != pb_r {
                return Err(Error::validation(format!(
                    "lora_linear: W is [{d_out}, {d_in}] but A is [{pr}, {pa_in}] and B is [{pb_out}, {pb_r}]"
                )));
            }
            Ok((y + p.delta(x)?)?)
        }
    }
}

/// LoRA pairs keyed by (global block index, projection).
#[derive(Debug, Clone, Default)]
pub struct LoraSet {
    pairs: BTreeMap<(usize, ProjTarget), LoraPair>,
}

impl LoraSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, block: usize, target: ProjTarget) -> Option<&LoraPair> {
        self.pairs.get(&(block, target))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, ProjTarget), &LoraPair)> {
        self.pairs.iter()
    }

    pub(crate) fn insert(&mut self, block: usize, target: ProjTarget, pair: LoraPair) {
        self.pairs.insert((block, target), pair);
    }
}

/// Checkpoint name prefix for a pair: `lora.{stage}.{target}` with a 1-based
/// stage index; stages holding several blocks add the block index.
pub fn lora_prefix(stage: usize, block_in_stage: usize, blocks_per_stage: usize, target: ProjTarget) -> String {
    if blocks_per_stage == 1 {
        format!("lora.{stage}.{}", target.key())
    } else {
        format!("lora.{stage}.{block_in_stage}.{}", target.key())
    }
}

/// Parses a comma separated target list such as `"Q,V"`.
pub fn parse_targets(list: &str) -> Result<Vec<ProjTarget>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(ProjTarget::from_str)
        .collect()
}

/// Parameters of the cross-branch masked attention.
///
/// Queries come from trunk tokens (`d_v` wide), keys and values from adapter
/// tokens (`d_u` wide). When `d_c != d_v` an output projection maps the
/// attended update back to the trunk width.
#[derive(Debug, Clone)]
pub struct CrossAttnParams {
    pub m_q: Tensor,
    pub m_k: Tensor,
    pub m_v: Tensor,
    pub out: Option<Tensor>,
    pub d_c: usize,
}

impl CrossAttnParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_v: usize, d_u: usize, d_c: usize) -> Result<Self> {
        if d_c == 0 {
            return Err(Error::config("cross-attention dimension d_c must be at least 1"));
        }
        let m_q = store.add(
            &format!("{prefix}.m_q"),
            &[d_v, d_c],
            Init::Normal {
                std: (1.0 / d_v as f64).sqrt(),
            },
            true,
        )?;
        let m_k = store.add(
            &format!("{prefix}.m_k"),
            &[d_u, d_c],
            Init::Normal {
                std: (1.0 / d_u as f64).sqrt(),
            },
            true,
        )?;
        let m_v = store.add(
            &format!("{prefix}.m_v"),
            &[d_u, d_c],
            Init::Normal {
                std: 0.5 * (1.0 / d_u as f64).sqrt(),
            },
            true,
        )?;
        let out = if d_c != d_v {
            Some(store.add(
                &format!("{prefix}.out"),
                &[d_c, d_v],
                Init::Normal {
                    std: (1.0 / d_c as f64).sqrt(),
                },
                true,
            )?)
        } else {
            None
        };
        Ok(Self { m_q, m_k, m_v, out, d_c })
    }

    pub fn from_tensors(m_q: Tensor, m_k: Tensor, m_v: Tensor, out: Option<Tensor>) -> Result<Self> {
        let (d_v, d_c) = m_q.dims2()?;
        let (_, kc) = m_k.dims2()?;
        let (_, vc) = m_v.dims2()?;
        if kc != d_c || vc != d_c {
            return Err(Error::validation(format!(
                "M_q, M_k, M_v must share d_c; got {d_c}, {kc}, {vc}"
            )));
        }
        match &out {
            None if d_c != d_v => {
                return Err(Error::validation(format!(
                    "d_c = {d_c} differs from d_v = {d_v} and no output projection was given"
                )))
            }
            _ => {}
        }
        Ok(Self { m_q, m_k, m_v, out, d_c })
    }

    /// Row-stochastic attention weights `[B, N_v, N_u]`.
    pub fn attention(&self, f_v: &FeatureMap, f_u: &FeatureMap) -> Result<Tensor> {
        let tv = f_v.tokens()?;
        let tu = f_u.tokens()?;
        let q = project(&tv, &self.m_q)?;
        let k = project(&tu, &self.m_k)?;
        let logits = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (self.d_c as f64).sqrt())?;
        softmax_last_dim(&logits)
    }

    /// `F = M ⊙ softmax((F_v M_q)(F_u M_k)ᵀ / √d_c)(F_u M_v) + F_v`, with `M`
    /// a per-query-token gate broadcast across channels.
    pub fn forward(&self, f_v: &FeatureMap, f_u: &FeatureMap, m: &Tensor) -> Result<FeatureMap> {
        let (b, _, h, w) = f_v.data.dims4()?;
        let (mb, mc, _, _) = m.dims4()?;
        if mb != b || mc != 1 {
            return Err(Error::validation(format!(
                "mask must be [{b}, 1, H, W], got {:?}",
                m.dims()
            )));
        }
        let lo = scalar_f64(&m.min_all()?)?;
        let hi = scalar_f64(&m.max_all()?)?;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
            return Err(Error::validation(format!(
                "mask values must lie in [0, 1], found range [{lo}, {hi}]"
            )));
        }
        let m = resample(m, h, w, Resample::Bilinear)?;
        let attn = self.attention(f_v, f_u)?;
        let v = project(&f_u.tokens()?, &self.m_v)?;
        let mut upd = attn.matmul(&v)?;
        if let Some(o) = &self.out {
            upd = project(&upd, o)?;
        }
        // [B, 1, H, W] -> [B, N, 1]
        let gate = m.reshape((b, h * w, 1))?;
        let fused = (upd.broadcast_mul(&gate)? + f_v.tokens()?)?;
        FeatureMap::from_tokens(&fused, h, w, f_v.scale_index, f_v.stride)
    }
}

/// `x · W` over the last dimension of `x`, with `W` stored `[d_in, d_out]`.
fn project(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    linear(x, &w.t()?, None)
}

pub fn cross_masked_attention(f_v: &FeatureMap, f_u: &FeatureMap, m: &Tensor, params: &CrossAttnParams) -> Result<FeatureMap> {
    params.forward(f_v, f_u, m)
}

/// Per-stage foreground predictor over fused trunk tokens.
#[derive(Debug, Clone)]
pub struct StageMaskHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl StageMaskHead {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        let weight = store.add(
            &format!("{prefix}.weight"),
            &[1, d],
            Init::Normal {
                std: (1.0 / d as f64).sqrt(),
            },
            true,
        )?;
        let bias = store.add(&format!("{prefix}.bias"), &[1], Init::Zeros, true)?;
        Ok(Self { weight, bias })
    }

    /// Logits `[B, 1, H, W]`.
    pub fn logits(&self, fused: &FeatureMap) -> Result<Tensor> {
        let (b, _, h, w) = fused.data.dims4()?;
        let t = linear(&fused.tokens()?, &self.weight, Some(&self.bias))?;
        Ok(t.reshape((b, 1, h, w))?)
    }
}

/// Sums of each attention row; used by the row-stochasticity checks.
pub fn attention_row_sums(attn: &Tensor) -> Result<Tensor> {
    Ok(attn.sum_keepdim(D::Minus1)?)
}
