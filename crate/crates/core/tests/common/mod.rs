//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urbansam::nn::ParamStore;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute gap when both are ~0.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central-difference check of `loss` against autograd for each var.
/// Returns `(name, relative error)` per var.
pub fn check_vars(vars: &[(String, Var)], loss: impl Fn() -> Tensor) -> Vec<(String, f64)> {
    let grads = loss().backward().unwrap();
    let scalar = |t: Tensor| t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    vars.iter()
        .map(|(name, var)| {
            let analytic = grads
                .get(var.as_tensor())
                .map(values)
                .unwrap_or_else(|| vec![0.0; var.elem_count()]);
            let base = values(var.as_tensor());
            let shape = var.dims().to_vec();
            let mut numeric = Vec::with_capacity(base.len());
            let mut probe = base.clone();
            for i in 0..base.len() {
                probe[i] = base[i] + FD_STEP;
                var.set(&Tensor::from_vec(probe.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                let up = scalar(loss());
                probe[i] = base[i] - FD_STEP;
                var.set(&Tensor::from_vec(probe.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                let down = scalar(loss());
                probe[i] = base[i];
                numeric.push((up - down) / (2.0 * FD_STEP));
            }
            var.set(&Tensor::from_vec(base, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            (name.clone(), rel_err(&analytic, &numeric))
        })
        .collect()
}

/// Every trainable parameter of `store`.
pub fn trainable(store: &ParamStore) -> Vec<(String, Var)> {
    store.trainable().map(|(n, v)| (n.clone(), v.clone())).collect()
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
pub fn probe_loss(out: &Tensor, seed: u64) -> Tensor {
    let r = uniform(out.dims(), -1.0, 1.0, seed);
    (out * r).unwrap().sum_all().unwrap()
}

/// Panics with the offending tensors if any check exceeds the tolerance.
pub fn assert_grads(what: &str, errs: &[(String, f64)]) {
    assert!(!errs.is_empty(), "{what}: nothing was checked");
    let bad: Vec<_> = errs.iter().filter(|(_, e)| e.is_nan() || *e > FD_TOL).collect();
    assert!(bad.is_empty(), "{what}: gradient mismatch {bad:?}");
}

/// A model small enough to train a few epochs in a test.
pub fn tiny_config(train_count: usize) -> urbansam::train::TrainConfig {
    use urbansam::data::SceneClass;
    use urbansam::train::{DataSpec, TrainConfig};
    let mut cfg = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 4,
        lora_rank: 2,
        lora_alpha: 4.0,
        data: DataSpec::Synthetic {
            class: SceneClass::Building,
            train_count,
            eval_count: 4,
            density: None,
            seed: 5,
        },
        ..TrainConfig::default()
    };
    let m = &mut cfg.model;
    m.trunk.image_size = 32;
    m.trunk.embed_dim = 16;
    m.trunk.num_heads = 2;
    m.adapter.channels = 4;
    m.adapter.num_scales = 2;
    m.cross_dim = 16;
    m.decoder.width = 4;
    m.decoder.mlp_hidden = 8;
    cfg
}
