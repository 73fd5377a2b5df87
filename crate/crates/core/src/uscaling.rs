//! U-Scaling adapter: cascaded encoder–decoder modules over a factor-2 scale
//! pyramid with a residual input connection.
//!
//! For module `i` with input `x`:
//!
//! ```text
//! e_0 = conv(conv(x)),  e_j = conv(conv(pool(e_{j-1})))        encoder
//! d_{n-1} = e_{n-1},    d_j = conv(up(d_{j+1})) + e_j          decoder
//! out = x + phi · Σ_j up(map_j(d_j))
//! ```
//!
//! so zeroing every convolution turns the module into the identity.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{max_pool, upsample_nearest, Conv2d, FeatureMap, Init, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UScalingConfig {
    pub num_modules: usize,
    pub num_scales: usize,
    pub phi: f64,
    pub channels: usize,
    pub downsample_factor: usize,
}

impl Default for UScalingConfig {
    fn default() -> Self {
        Self {
            num_modules: 4,
            num_scales: 4,
            phi: 2.0,
            channels: 16,
            downsample_factor: 2,
        }
    }
}

impl UScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_modules == 0 {
            return Err(Error::config("num_modules must be at least 1"));
        }
        if self.num_scales < 2 {
            return Err(Error::config("num_scales must be at least 2"));
        }
        if self.phi.is_nan() || self.phi <= 0.0 {
            return Err(Error::config("phi must be positive"));
        }
        if self.channels == 0 || self.downsample_factor < 2 {
            return Err(Error::config("channels must be positive and downsample_factor at least 2"));
        }
        Ok(())
    }

    /// Spatial divisor the module input must satisfy.
    pub fn required_divisor(&self) -> usize {
        self.downsample_factor.pow(self.num_scales as u32 - 1)
    }
}

/// Encoder features indexed by scale.
#[derive(Debug, Clone)]
pub struct ScalePyramid {
    pub levels: Vec<FeatureMap>,
}

#[derive(Debug, Clone)]
pub struct UScalingModule {
    index: usize,
    encoder: Vec<(Conv2d, Conv2d)>,
    decoder: Vec<Conv2d>,
    maps: Vec<Conv2d>,
    phi: f64,
    factor: usize,
}

impl UScalingModule {
    /// `scales` may be 1 for the single-scale ablation.
    pub fn new(store: &mut ParamStore, index: usize, cfg: &UScalingConfig, scales: usize) -> Result<Self> {
        let c = cfg.channels;
        let p = format!("adapter.module{index}");
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        let mut maps = Vec::new();
        for j in 0..scales {
            encoder.push((
                Conv2d::new(store, &format!("{p}.enc{j}.conv1"), c, c, 3, 1, 1, true)?,
                Conv2d::new(store, &format!("{p}.enc{j}.conv2"), c, c, 3, 1, 1, true)?,
            ));
            if j + 1 < scales {
                decoder.push(Conv2d::new(store, &format!("{p}.dec{j}"), c, c, 3, 1, 1, true)?);
            }
            maps.push(Conv2d::with_init(
                store,
                &format!("{p}.map{j}"),
                [c, c, 1, 1, 0],
                Init::Normal {
                    std: 0.1 / (c as f64).sqrt(),
                },
                Init::Zeros,
                true,
            )?);
        }
        Ok(Self {
            index,
            encoder,
            decoder,
            maps,
            phi: cfg.phi,
            factor: cfg.downsample_factor,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn num_scales(&self) -> usize {
        self.encoder.len()
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, ScalePyramid)> {
        let n = self.num_scales();
        let div = self.factor.pow(n as u32 - 1);
        let (_, _, h, w) = x.data.dims4()?;
        if h % div != 0 || w % div != 0 {
            return Err(Error::config(format!(
                "U-Scaling module {} needs spatial dims divisible by {div}, got {h}x{w}",
                self.index
            )));
        }

        let mut levels: Vec<FeatureMap> = Vec::with_capacity(n);
        for (j, (c1, c2)) in self.encoder.iter().enumerate() {
            let inp = if j == 0 {
                x.data.clone()
            } else {
                max_pool(&levels[j - 1].data, self.factor)?
            };
            let e = c2.forward(&c1.forward(&inp)?.relu()?)?.relu()?;
            levels.push(FeatureMap::new(e, j, x.stride * self.factor.pow(j as u32)));
        }

        // deep-to-shallow aggregation
        let mut dec = vec![levels[n - 1].data.clone(); n];
        for j in (0..n - 1).rev() {
            let deeper = &dec[j + 1];
            let up = upsample_nearest(deeper, self.factor, self.factor)?;
            dec[j] = (self.decoder[j].forward(&up)?.relu()? + &levels[j].data)?;
        }

        let mut acc: Option<Tensor> = None;
        for (j, d) in dec.iter().enumerate() {
            let t = self.maps[j].forward(d)?;
            let f = self.factor.pow(j as u32);
            let t = upsample_nearest(&t, f, f)?;
            acc = Some(match acc {
                None => t,
                Some(a) => (a + t)?,
            });
        }
        let out = (&x.data + (acc.expect("at least one scale") * self.phi)?)?;
        Ok((
            FeatureMap::new(out, x.scale_index, x.stride),
            ScalePyramid { levels },
        ))
    }
}

/// Output of the adapter for one batch.
#[derive(Debug, Clone)]
pub struct AdapterOutput {
    pub stem: FeatureMap,
    /// Weighted output of every module with its encoder pyramid.
    pub modules: Vec<(FeatureMap, ScalePyramid)>,
}

/// Convolutional stem followed by the cascaded U-Scaling modules, each
/// output scaled by a learnable per-module weight.
#[derive(Debug, Clone)]
pub struct AdapterStack {
    stem: Conv2d,
    stem_stride: usize,
    modules: Vec<UScalingModule>,
    pub module_weights: Vec<Tensor>,
}

impl AdapterStack {
    pub fn new(store: &mut ParamStore, cfg: &UScalingConfig, stem_stride: usize, multiscale: bool) -> Result<Self> {
        cfg.validate()?;
        if stem_stride == 0 {
            return Err(Error::config("adapter stem stride must be positive"));
        }
        let stem = Conv2d::new(store, "adapter.stem", 3, cfg.channels, 3, stem_stride, 1, true)?;
        let scales = if multiscale { cfg.num_scales } else { 1 };
        let mut modules = Vec::new();
        let mut module_weights = Vec::new();
        for i in 1..=cfg.num_modules {
            modules.push(UScalingModule::new(store, i, cfg, scales)?);
            module_weights.push(store.add(&format!("adapter.module{i}.weight"), &[1], Init::Constant(1.0), true)?);
        }
        Ok(Self {
            stem,
            stem_stride,
            modules,
            module_weights,
        })
    }

    pub fn modules(&self) -> &[UScalingModule] {
        &self.modules
    }

    pub fn stem(&self, image: &Tensor) -> Result<FeatureMap> {
        let s = self.stem.forward(image)?.relu()?;
        Ok(FeatureMap::new(s, 0, self.stem_stride))
    }

    /// Module `i` consumes module `i-1`'s weighted output; module 1 consumes the stem.
    pub fn adapter_stack(&self, stem: &FeatureMap) -> Result<Vec<(FeatureMap, ScalePyramid)>> {
        let mut prev = stem.clone();
        let mut out = Vec::with_capacity(self.modules.len());
        for (m, w) in self.modules.iter().zip(&self.module_weights) {
            let (y, pyr) = m.forward(&prev)?;
            let y = FeatureMap::new(y.data.broadcast_mul(w)?, y.scale_index, y.stride);
            prev = y.clone();
            out.push((y, pyr));
        }
        Ok(out)
    }

    pub fn forward(&self, image: &Tensor) -> Result<AdapterOutput> {
        let stem = self.stem(image)?;
        let modules = self.adapter_stack(&stem)?;
        Ok(AdapterOutput { stem, modules })
    }
}
