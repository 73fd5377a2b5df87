//! Mask prompts learned from the stage predictions: a 1×1 fusion of the
//! stage probability maps followed by a threshold `tau` that is itself
//! trained through a straight-through estimator.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{resample, scalar_f64, sigmoid, Init, ParamStore, Resample};

/// Lower and upper clamp applied whenever `tau` is read.
pub const TAU_MIN: f64 = 1e-6;
pub const TAU_MAX: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone)]
pub struct PromptHead {
    /// `[1, n_masks, 1, 1]`
    pub fusion_weight: Tensor,
    /// `[1]`
    pub fusion_bias: Tensor,
    /// `[1]`, raw value; read through [`PromptHead::tau`].
    pub tau: Tensor,
}

/// Hard prompt plus the soft map it was cut from.
#[derive(Debug, Clone)]
pub struct PromptMask {
    /// Exact {0, 1} map, no gradient.
    pub data: Tensor,
    /// `sigmoid(P_mask)`.
    pub soft: Tensor,
    /// Forward value equals `data`; backward follows `sigmoid(P_mask - logit(tau))`.
    pub straight_through: Tensor,
}

impl PromptHead {
    pub fn new(store: &mut ParamStore, n_masks: usize) -> Result<Self> {
        if n_masks == 0 {
            return Err(Error::config("prompt head needs at least one stage mask"));
        }
        let fusion_weight = store.add("prompt.fusion.weight", &[1, n_masks, 1, 1], Init::Constant(2.0), true)?;
        let fusion_bias = store.add("prompt.fusion.bias", &[1], Init::Constant(-(n_masks as f64)), true)?;
        let tau = store.add("prompt.tau", &[1], Init::Constant(0.5), true)?;
        Ok(Self {
            fusion_weight,
            fusion_bias,
            tau,
        })
    }

    pub fn from_tensors(fusion_weight: Tensor, fusion_bias: Tensor, tau: Tensor) -> Self {
        Self {
            fusion_weight,
            fusion_bias,
            tau,
        }
    }

    pub fn num_inputs(&self) -> usize {
        self.fusion_weight.dims()[1]
    }

    /// Clamped threshold as a differentiable `[1]` tensor.
    pub fn tau(&self) -> Result<Tensor> {
        Ok(self.tau.clamp(TAU_MIN, TAU_MAX)?)
    }

    pub fn tau_value(&self) -> Result<f64> {
        scalar_f64(&self.tau()?)
    }

    /// Concatenates stage probability maps (resampled bilinearly to the
    /// first map's grid) and applies the 1×1 fusion; returns logits
    /// `[B, 1, H, W]`.
    pub fn fuse_stage_masks(&self, stage_masks: &[Tensor]) -> Result<Tensor> {
        let first = stage_masks
            .first()
            .ok_or_else(|| Error::validation("fuse_stage_masks needs at least one stage mask"))?;
        if stage_masks.len() != self.num_inputs() {
            return Err(Error::validation(format!(
                "prompt head fuses {} masks, got {}",
                self.num_inputs(),
                stage_masks.len()
            )));
        }
        let (_, _, h, w) = first.dims4()?;
        let maps = stage_masks
            .iter()
            .map(|m| resample(m, h, w, Resample::Bilinear))
            .collect::<Result<Vec<_>>>()?;
        let cat = Tensor::cat(&maps, 1)?;
        let y = cat.conv2d(&self.fusion_weight, 0, 1, 1, 1)?;
        Ok(y.broadcast_add(&self.fusion_bias.reshape((1, 1, 1, 1))?)?)
    }

    pub fn binarize(&self, p_mask: &Tensor) -> Result<PromptMask> {
        binarize(p_mask, &self.tau()?)
    }
}

/// `data = 1` exactly where `sigmoid(P_mask) >= tau`.
pub fn binarize(p_mask: &Tensor, tau: &Tensor) -> Result<PromptMask> {
    let tau_v = scalar_f64(tau)?;
    if !(tau_v > 0.0 && tau_v < 1.0) {
        return Err(Error::validation(format!("tau must lie in (0, 1), got {tau_v}")));
    }
    let soft = sigmoid(p_mask)?;
    let tau_b = tau.to_dtype(soft.dtype())?.reshape((1, 1, 1, 1))?;
    let data = soft.broadcast_ge(&tau_b)?.to_dtype(soft.dtype())?;
    let surrogate = surrogate(p_mask, &tau_b)?;
    let straight_through = (&surrogate + (&data - &surrogate)?.detach())?;
    Ok(PromptMask {
        data,
        soft,
        straight_through,
    })
}

/// `sigmoid(P_mask - logit(tau))`, the smooth stand-in used for gradients.
pub fn surrogate(p_mask: &Tensor, tau: &Tensor) -> Result<Tensor> {
    let tau = tau.reshape((1, 1, 1, 1))?;
    let logit = (tau.log()? - tau.affine(-1.0, 1.0)?.log()?)?;
    sigmoid(&p_mask.broadcast_sub(&logit)?)
}

/// Convenience: `{0,1}` values of a prompt as `u8`.
pub fn prompt_to_u8(data: &Tensor) -> Result<Vec<u8>> {
    Ok(data.flatten_all()?.to_dtype(DType::U8)?.to_vec1::<u8>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f64;
    use candle_core::Device;

    fn map(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), (1, 1, 1, v.len()), &Device::Cpu).unwrap()
    }

    fn tau(v: f64) -> Tensor {
        Tensor::new(&[v], &Device::Cpu).unwrap()
    }

    #[test]
    fn boundary_logit_zero() {
        let p = binarize(&map(&[0.0]), &tau(0.5)).unwrap();
        assert_eq!(to_vec_f64(&p.data).unwrap(), vec![1.0]);
    }

    #[test]
    fn strongly_negative_logit() {
        let p = binarize(&map(&[-10.0]), &tau(0.5)).unwrap();
        assert_eq!(to_vec_f64(&p.data).unwrap(), vec![0.0]);
    }

    #[test]
    fn mixed_logits() {
        let p = binarize(&map(&[-1.0, 0.0, 2.0]), &tau(0.6)).unwrap();
        assert_eq!(to_vec_f64(&p.data).unwrap(), vec![0.0, 0.0, 1.0]);
        let st = to_vec_f64(&p.straight_through).unwrap();
        for (a, b) in st.iter().zip([0.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tau_out_of_range_rejected() {
        assert!(binarize(&map(&[0.0]), &tau(1.0)).is_err());
    }

    #[test]
    fn fusion_examples() {
        let dev = Device::Cpu;
        let one = PromptHead::from_tensors(
            Tensor::ones((1, 1, 1, 1), DType::F64, &dev).unwrap(),
            Tensor::zeros(1, DType::F64, &dev).unwrap(),
            tau(0.5),
        );
        let m = Tensor::new(&[[[[0.1f64, 0.7], [0.3, 0.9]]]], &dev).unwrap();
        let y = one.fuse_stage_masks(std::slice::from_ref(&m)).unwrap();
        assert_eq!(to_vec_f64(&y).unwrap(), to_vec_f64(&m).unwrap());

        let two = PromptHead::from_tensors(
            Tensor::ones((1, 2, 1, 1), DType::F64, &dev).unwrap(),
            Tensor::zeros(1, DType::F64, &dev).unwrap(),
            tau(0.5),
        );
        let a = Tensor::full(0.2f64, (1, 1, 3, 3), &dev).unwrap();
        let b = Tensor::full(0.8f64, (1, 1, 3, 3), &dev).unwrap();
        for v in to_vec_f64(&two.fuse_stage_masks(&[a.clone(), b]).unwrap()).unwrap() {
            assert!((v - 1.0).abs() < 1e-15);
        }

        let zero = PromptHead::from_tensors(
            Tensor::zeros((1, 1, 1, 1), DType::F64, &dev).unwrap(),
            Tensor::new(&[-0.75f64], &dev).unwrap(),
            tau(0.5),
        );
        for v in to_vec_f64(&zero.fuse_stage_masks(&[a]).unwrap()).unwrap() {
            assert_eq!(v, -0.75);
        }
        assert!(zero.fuse_stage_masks(&[]).is_err());
    }

    #[test]
    fn tau_receives_gradient_through_straight_through() {
        let mut store = ParamStore::new(DType::F64, 0);
        let head = PromptHead::new(&mut store, 1).unwrap();
        let p = map(&[-0.3, 0.1, 0.8]);
        let pm = head.binarize(&p).unwrap();
        let loss = pm.straight_through.sum_all().unwrap();
        let g = loss.backward().unwrap();
        let gt = scalar_f64(g.get(&head.tau).unwrap()).unwrap();
        assert!(gt < 0.0, "raising tau should shrink the mask, got {gt}");
    }
}
