//! Parameter storage, seeded initialisation and the handful of layers the
//! model is assembled from.
//!
//! Every parameter is held as a [`Var`] so checkpoints can overwrite it in
//! place. Frozen parameters are handed to layers as detached views of the
//! same storage: the autograd graph never records them, so they can not
//! receive a gradient.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Constant(f64),
    Normal { std: f64 },
    Values(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub var: Var,
    pub trainable: bool,
}

/// Named parameter registry shared by all model parts.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    seed: u64,
    entries: BTreeMap<String, ParamEntry>,
}

pub(crate) fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a parameter and returns the tensor handle layers should use.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Tensor> {
        if self.entries.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let numel: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Constant(c) => vec![c; numel],
            Init::Normal { std } => {
                // one stream per name keeps initial values independent of
                // construction order
                let stream = fnv1a(name.as_bytes(), FNV_OFFSET ^ self.seed);
                let mut rng = ChaCha8Rng::seed_from_u64(stream);
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::config(format!("bad init std for `{name}`: {e}")))?;
                (0..numel).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Values(v) => {
                if v.len() != numel {
                    return Err(Error::config(format!(
                        "init for `{name}` has {} values, shape {shape:?} needs {numel}",
                        v.len()
                    )));
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = if trainable {
            var.as_tensor().clone()
        } else {
            var.as_detached_tensor()
        };
        self.entries
            .insert(name.to_string(), ParamEntry { var, trainable });
        Ok(handle)
    }

    pub fn entries(&self) -> &BTreeMap<String, ParamEntry> {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, e)| (n, &e.var))
    }

    pub fn frozen(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.trainable)
            .map(|(n, e)| (n, &e.var))
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn num_total(&self) -> usize {
        self.entries.values().map(|e| e.var.elem_count()).sum()
    }

    /// Overwrites a parameter in place; all layer handles observe the change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        if entry.var.shape() != value.shape() {
            return Err(Error::validation(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                entry.var.dims(),
                value.dims()
            )));
        }
        entry.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Stable 64-bit checksum over the frozen parameters (names and bytes).
    pub fn frozen_checksum(&self) -> Result<u64> {
        let mut h = FNV_OFFSET;
        for (name, var) in self.frozen() {
            h = fnv1a(name.as_bytes(), h);
            h = fnv1a(&tensor_le_bytes(var.as_tensor())?, h);
        }
        Ok(h)
    }
}

pub(crate) fn tensor_le_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => {
            return Err(Error::config(format!("unsupported dtype {other:?}")));
        }
    })
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

/// Returns a numeric error naming `location` if `t` holds a NaN or infinity.
pub fn ensure_finite(t: &Tensor, location: &str) -> Result<()> {
    let s = scalar_f64(&t.abs()?.sum_all()?)?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(location, format!("non-finite activations (|sum| = {s})")))
    }
}

/// A `[batch, channels, height, width]` activation tensor tagged with its
/// scale index and stride relative to the input image.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub scale_index: usize,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, scale_index: usize, stride: usize) -> Self {
        Self {
            data,
            scale_index,
            stride,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[3]
    }

    /// `[B, C, H, W]` -> `[B, H*W, C]`
    pub fn tokens(&self) -> Result<Tensor> {
        Ok(self.data.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
    }

    pub fn from_tokens(tokens: &Tensor, height: usize, width: usize, scale_index: usize, stride: usize) -> Result<Self> {
        let (b, n, c) = tokens.dims3()?;
        if n != height * width {
            return Err(Error::validation(format!(
                "{n} tokens do not fill a {height}x{width} grid"
            )));
        }
        let data = tokens
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, c, height, width))?;
        Ok(Self::new(data, scale_index, stride))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        trainable: bool,
    ) -> Result<Self> {
        let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        Self::with_init(
            store,
            name,
            [c_in, c_out, kernel, stride, padding],
            Init::Normal { std },
            Init::Zeros,
            trainable,
        )
    }

    /// `dims` is `[c_in, c_out, kernel, stride, padding]`.
    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 5],
        weight_init: Init,
        bias_init: Init,
        trainable: bool,
    ) -> Result<Self> {
        let [c_in, c_out, k, stride, padding] = dims;
        let weight = store.add(&format!("{name}.weight"), &[c_out, c_in, k, k], weight_init, trainable)?;
        let bias = store.add(&format!("{name}.bias"), &[c_out], bias_init, trainable)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = crate::conv::conv2d(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Kernel-2, stride-2 transposed convolution (exact x2 upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2x {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvTranspose2x {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, trainable: bool) -> Result<Self> {
        let std = (2.0 / c_in as f64).sqrt();
        let weight = store.add(&format!("{name}.weight"), &[c_in, c_out, 2, 2], Init::Normal { std }, trainable)?;
        let bias = store.add(&format!("{name}.bias"), &[c_out], Init::Zeros, trainable)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // per-pixel matmul followed by a 2×2 pixel shuffle
        let (b, ci, h, w) = x.dims4()?;
        let co = self.bias.dims1()?;
        let cols = x.permute((0, 2, 3, 1))?.contiguous()?.reshape((b * h * w, ci))?;
        let y = cols.matmul(&self.weight.reshape((ci, co * 4))?)?;
        let y = y
            .reshape((b, h, w, co, 2, 2))?
            .permute((0, 3, 1, 4, 2, 5))?
            .contiguous()?
            .reshape((b, co, 2 * h, 2 * w))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Affine map over the last dimension; weight is `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        trainable: bool,
    ) -> Result<Self> {
        let std = (1.0 / d_in as f64).sqrt();
        let weight = store.add(&format!("{name}.weight"), &[d_out, d_in], Init::Normal { std }, trainable)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), &[d_out], Init::Zeros, trainable)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, self.bias.as_ref())
    }
}

/// `x · Wᵀ + b` for `x` of any rank whose last dim equals `W`'s input dim.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let d_in = *dims.last().ok_or_else(|| Error::validation("linear input is a scalar"))?;
    let (d_out, w_in) = weight.dims2()?;
    if d_in != w_in {
        return Err(Error::validation(format!(
            "linear: input last dim {d_in} does not match weight [{d_out}, {w_in}]"
        )));
    }
    let rows = x.elem_count() / d_in;
    let y = x.reshape((rows, d_in))?.matmul(&weight.t()?)?;
    let y = match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = d_out;
    Ok(y.reshape(out_dims)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), &[dim], Init::Constant(1.0), trainable)?;
        let beta = store.add(&format!("{name}.beta"), &[dim], Init::Zeros, trainable)?;
        Ok(Self {
            gamma,
            beta,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Logistic function written through `tanh` so the backward pass stays
/// finite for large-magnitude logits.
/// Integer-factor nearest upsampling by broadcasting; the gradient is a
/// plain block sum.
pub fn upsample_nearest(x: &Tensor, factor_h: usize, factor_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if factor_h == 1 && factor_w == 1 {
        return Ok(x.clone());
    }
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor_h, w, factor_w))?
        .reshape((b, c, h * factor_h, w * factor_w))?)
}

/// Non-overlapping `f×f` max pooling. Built from reductions because candle's
/// `max_pool2d` backward scatters gradient incorrectly.
/// TODO: switch back to `max_pool2d` once candle fixes its pooling backward.
pub fn max_pool(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % f != 0 || w % f != 0 {
        return Err(Error::config(format!("max_pool: {h}x{w} is not divisible by {f}")));
    }
    Ok(x.reshape((b, c, h / f, f, w / f, f))?.max(5)?.max(3)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Row-stochastic bilinear interpolation matrix `[out, in]` using the
/// half-pixel convention (`align_corners = false`).
pub fn bilinear_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[i * n_in + i0] += 1.0 - frac;
        m[i * n_in + i1] += frac;
    }
    m
}

/// Block-averaging matrix; falls back to bilinear when `n_in` is not a
/// multiple of `n_out`.
pub fn area_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    if n_out > n_in || !n_in.is_multiple_of(n_out) {
        return bilinear_matrix(n_in, n_out);
    }
    let k = n_in / n_out;
    let mut m = vec![0.0; n_out * n_in];
    for i in 0..n_out {
        for j in 0..k {
            m[i * n_in + i * k + j] = 1.0 / k as f64;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Bilinear,
    Area,
}

/// Separable differentiable resampling of a `[B, C, H, W]` tensor.
pub fn resample(x: &Tensor, height: usize, width: usize, mode: Resample) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == height && w == width {
        return Ok(x.clone());
    }
    let build = |n_in, n_out| match mode {
        Resample::Bilinear => bilinear_matrix(n_in, n_out),
        Resample::Area => area_matrix(n_in, n_out),
    };
    let dev = x.device();
    let rw = Tensor::from_vec(build(w, width), (width, w), dev)?.to_dtype(x.dtype())?;
    let rh = Tensor::from_vec(build(h, height), (height, h), dev)?.to_dtype(x.dtype())?;
    // along width
    let t = x.reshape((b * c * h, w))?.matmul(&rw.t()?)?;
    // along height
    let t = t
        .reshape((b * c, h, width))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * width, h))?
        .matmul(&rh.t()?)?;
    Ok(t.reshape((b * c, width, height))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, height, width))?)
}
