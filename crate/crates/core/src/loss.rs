//! Weighted BCE + Dice and the deep-supervised total objective.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clip used inside the BCE logarithms.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub n_masks: usize,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_bce: 0.2,
            lambda_dice: 0.8,
            n_masks: 5,
            dice_smooth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_bce < 0.0 || self.lambda_dice < 0.0 {
            return Err(Error::validation(format!(
                "loss weights must be non-negative, got bce={} dice={}",
                self.lambda_bce, self.lambda_dice
            )));
        }
        if self.n_masks == 0 {
            return Err(Error::validation("n_masks must be at least 1"));
        }
        if self.dice_smooth.is_nan() || self.dice_smooth <= 0.0 {
            return Err(Error::validation("dice_smooth must be positive"));
        }
        Ok(())
    }
}

fn same_shape(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::validation(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// Mean over every element of `-[y log p + (1-y) log(1-p)]`, `p` clipped to
/// `[eps, 1-eps]`.
pub fn bce_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(pred, gt)?;
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = (gt * p.log()?)?;
    let neg = (gt.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// Soft Dice `1 - (2Σpy + s)/(Σp + Σy + s)` per sample (leading dim), averaged.
pub fn dice_loss(pred: &Tensor, gt: &Tensor, smooth: f64) -> Result<Tensor> {
    same_shape(pred, gt)?;
    let b = pred.dims().first().copied().unwrap_or(1);
    let p = pred.reshape((b, ()))?;
    let y = gt.reshape((b, ()))?;
    let inter = (&p * &y)?.sum(1)?;
    let denom = ((p.sum(1)? + y.sum(1)?)? + smooth)?;
    let ratio = ((inter * 2.0)? + smooth)?.div(&denom)?;
    Ok(ratio.affine(-1.0, 1.0)?.mean_all()?)
}

/// `λ_bce · L_bce + λ_dice · L_dice`.
pub fn composite_loss(pred: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    let bce = bce_loss(pred, gt)?;
    let dice = dice_loss(pred, gt, w.dice_smooth)?;
    Ok(((bce * w.lambda_bce)? + (dice * w.lambda_dice)?)?)
}

/// Index map of nearest-neighbour resampling from `n_in` to `n_out` cells.
pub fn nearest_indices(n_in: usize, n_out: usize) -> Vec<u32> {
    (0..n_out)
        .map(|i| ((i * n_in) / n_out).min(n_in - 1) as u32)
        .collect()
}

/// Nearest-neighbour resize of a `[B, C, H, W]` label map; preserves binarity.
pub fn downsample_nearest(gt: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = gt.dims4()?;
    if h == height && w == width {
        return Ok(gt.clone());
    }
    let dev = gt.device();
    let rows = Tensor::from_vec(nearest_indices(h, height), height, dev)?;
    let cols = Tensor::from_vec(nearest_indices(w, width), width, dev)?;
    Ok(gt.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

/// The three supervised terms and their sum.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: Tensor,
    pub final_term: Tensor,
    pub quarter_term: Tensor,
    pub mask_term: Tensor,
}

/// `L(ŷ, y) + L(ŷ_¼, D(y)) + (1/n) Σ_k L(ŷ_mask^k, D(y))` with `D` the
/// nearest-neighbour downsample of `y` to each prediction's grid.
pub fn total_loss(final_pred: &Tensor, quarter_pred: &Tensor, stage_mask_preds: &[Tensor], gt: &Tensor, w: &LossWeights) -> Result<TotalLoss> {
    w.validate()?;
    if stage_mask_preds.len() != w.n_masks {
        return Err(Error::validation(format!(
            "expected {} mask predictions, got {}",
            w.n_masks,
            stage_mask_preds.len()
        )));
    }
    let at = |p: &Tensor| -> Result<Tensor> {
        let (_, _, h, ww) = p.dims4()?;
        downsample_nearest(gt, h, ww)
    };
    let final_term = composite_loss(final_pred, gt, w)?;
    let quarter_term = composite_loss(quarter_pred, &at(quarter_pred)?, w)?;
    let mut acc: Option<Tensor> = None;
    for p in stage_mask_preds {
        let l = composite_loss(p, &at(p)?, w)?;
        acc = Some(match acc {
            None => l,
            Some(a) => (a + l)?,
        });
    }
    let mask_term = (acc.expect("n_masks >= 1") / w.n_masks as f64)?;
    let total = ((&final_term + &quarter_term)? + &mask_term)?;
    Ok(TotalLoss {
        total,
        final_term,
        quarter_term,
        mask_term,
    })
}

/// `[H*W]` u8 labels -> `[1, 1, H, W]` tensor of the given dtype.
pub fn labels_to_tensor(labels: &[u8], height: usize, width: usize, dtype: DType) -> Result<Tensor> {
    let t = Tensor::from_vec(labels.to_vec(), (1, 1, height, width), &candle_core::Device::Cpu)?;
    Ok(t.to_dtype(dtype)?)
}
