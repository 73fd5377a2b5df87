//! Finite-difference checks of every learnable tensor at toy sizes, in f64.
//! Each function returns `(tensor name, relative error)` pairs.

use candle_core::{DType, Tensor, Var};
use urbansam::alignment::{cross_masked_attention, lora_linear, CrossAttnParams, LoraPair, ProjTarget, StageMaskHead};
use urbansam::decoder::{ConsistencyDecoder, DecoderConfig, DecoderGeometry};
use urbansam::loss::{composite_loss, total_loss, LossWeights};
use urbansam::nn::{sigmoid, FeatureMap, Init, ParamStore};
use urbansam::prompt::{surrogate, PromptHead};
use urbansam::trunk::{attach_lora, Encoder, TrunkConfig};
use urbansam::uscaling::{AdapterStack, UScalingConfig};

use super::{check_vars, probe_loss, trainable, uniform};

pub type Errors = Vec<(String, f64)>;

/// Moves every trainable value off its structured init (zero LoRA B,
/// zero biases, constant gates) so no gradient is trivially zero.
fn randomize(store: &ParamStore, seed: u64, scale: f64) {
    for (i, (name, var)) in store.trainable().enumerate() {
        let noise = uniform(var.dims(), -scale, scale, seed + i as u64);
        let v = (var.as_tensor().detach() + noise).unwrap();
        store.set(name, &v).unwrap();
    }
}

pub fn adapter() -> Errors {
    let mut store = ParamStore::new(DType::F64, 1);
    let cfg = UScalingConfig {
        num_modules: 2,
        num_scales: 2,
        phi: 2.0,
        channels: 3,
        downsample_factor: 2,
    };
    let adapter = AdapterStack::new(&mut store, &cfg, 2, true).unwrap();
    randomize(&store, 10, 0.2);
    let x = uniform(&[1, 3, 8, 8], -1.0, 1.0, 2);
    check_vars(&trainable(&store), || {
        let out = adapter.forward(&x).unwrap();
        let last = &out.modules.last().unwrap().0.data;
        let first = &out.modules[0].0.data;
        (probe_loss(last, 3) + probe_loss(first, 4)).unwrap()
    })
}

pub fn lora() -> Errors {
    let mut store = ParamStore::new(DType::F64, 2);
    let w = store.add("w", &[5, 6], Init::Normal { std: 0.5 }, false).unwrap();
    let pair = LoraPair::new(&mut store, "lora", 6, 5, 2, 4.0).unwrap();
    randomize(&store, 20, 0.3);
    let x = uniform(&[2, 3, 6], -1.0, 1.0, 5);
    check_vars(&trainable(&store), || probe_loss(&lora_linear(&x, &w, None, Some(&pair)).unwrap(), 6))
}

/// `M_q`, `M_k`, `M_v`, the output projection and the stage mask head.
pub fn cross_attention() -> Errors {
    let mut store = ParamStore::new(DType::F64, 3);
    let params = CrossAttnParams::new(&mut store, "cross", 4, 3, 5).unwrap();
    let head = StageMaskHead::new(&mut store, "head", 4).unwrap();
    randomize(&store, 30, 0.2);
    let f_v = FeatureMap::new(uniform(&[2, 4, 2, 2], -1.0, 1.0, 7), 0, 8);
    let f_u = FeatureMap::new(uniform(&[2, 3, 2, 2], -1.0, 1.0, 8), 0, 8);
    let m = uniform(&[2, 1, 2, 2], 0.1, 0.9, 9);
    check_vars(&trainable(&store), || {
        let fused = cross_masked_attention(&f_v, &f_u, &m, &params).unwrap();
        let p = sigmoid(&head.logits(&fused).unwrap()).unwrap();
        (probe_loss(&fused.data, 10) + probe_loss(&p, 11)).unwrap()
    })
}

/// LoRA factors inside the frozen trunk plus every interaction.
pub fn encoder() -> Errors {
    let cfg = TrunkConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 4,
        num_stages: 2,
        blocks_per_stage: 1,
        num_heads: 2,
        mlp_ratio: 1.0,
    };
    let mut store = ParamStore::new(DType::F64, 4);
    let lora = attach_lora(&mut store, &cfg, &[ProjTarget::Q, ProjTarget::V], 2, 4.0).unwrap();
    let enc = Encoder::new(&mut store, &cfg, lora, 3, 4, true).unwrap();
    randomize(&store, 40, 0.2);
    let image = uniform(&[1, 3, 16, 16], -1.0, 1.0, 12);
    let feats: Vec<_> = (0..2)
        .map(|s| FeatureMap::new(uniform(&[1, 3, 2, 2], -1.0, 1.0, 13 + s), 0, 8))
        .collect();
    let masks: Vec<_> = (0..2).map(|s| uniform(&[1, 1, 2, 2], 0.1, 0.9, 20 + s)).collect();
    let vars = trainable(&store);
    assert!(vars.iter().any(|(n, _)| n.contains(".A")), "no LoRA factors attached");
    check_vars(&vars, || {
        let bundles = enc.encode(&image, &feats, &masks).unwrap();
        let mut l = probe_loss(&bundles[1].fused.data, 30);
        for (i, b) in bundles.iter().enumerate() {
            l = (l + probe_loss(&b.stage_mask, 31 + i as u64)).unwrap();
        }
        l
    })
}

/// Stage fusion weights and the threshold through the soft path.
pub fn prompt() -> Errors {
    let mut store = ParamStore::new(DType::F64, 5);
    let head = PromptHead::new(&mut store, 3).unwrap();
    randomize(&store, 50, 0.2);
    let maps: Vec<Tensor> = (0..3).map(|i| uniform(&[2, 1, 4, 4], 0.05, 0.95, 60 + i)).collect();
    let errs = check_vars(&trainable(&store), || {
        let logits = head.fuse_stage_masks(&maps).unwrap();
        let soft = sigmoid(&logits).unwrap();
        let sur = surrogate(&logits, &head.tau().unwrap()).unwrap();
        (probe_loss(&soft, 70) + probe_loss(&sur, 71)).unwrap()
    });
    assert!(errs.iter().any(|(n, _)| n == "prompt.tau"), "threshold not checked");
    errs
}

pub fn decoder() -> Errors {
    let mut store = ParamStore::new(DType::F64, 6);
    let geom = DecoderGeometry {
        trunk_dim: 4,
        adapter_channels: 3,
        token_grid: 2,
        adapter_grid: 4,
        image_size: 8,
    };
    let cfg = DecoderConfig { width: 3, mlp_hidden: 4 };
    let dec = ConsistencyDecoder::new(&mut store, &cfg, geom, true).unwrap();
    randomize(&store, 80, 0.2);
    let f_v = FeatureMap::new(uniform(&[1, 4, 2, 2], -1.0, 1.0, 81), 0, 4);
    let m_fv = FeatureMap::new(uniform(&[1, 4, 2, 2], -1.0, 1.0, 82), 1, 8);
    let f_u = FeatureMap::new(uniform(&[1, 3, 4, 4], -1.0, 1.0, 83), 0, 2);
    let m_pre = uniform(&[1, 1, 8, 8], 0.0, 1.0, 84);
    check_vars(&trainable(&store), || {
        let out = dec.decode(&f_v, &f_u, &m_pre, &m_fv).unwrap();
        (probe_loss(&out.seg_logits, 85) + probe_loss(&out.aux_logits, 86)).unwrap()
    })
}

/// Composite and total loss with respect to every prediction they consume.
pub fn losses() -> Errors {
    let w = LossWeights::default();
    let gt = uniform(&[2, 1, 8, 8], 0.0, 1.0, 90).ge(0.5).unwrap().to_dtype(DType::F64).unwrap();
    let pred = Var::from_tensor(&uniform(&[2, 1, 8, 8], 0.05, 0.95, 91)).unwrap();
    let quarter = Var::from_tensor(&uniform(&[2, 1, 2, 2], 0.05, 0.95, 92)).unwrap();
    let masks: Vec<Var> = (0..5)
        .map(|i| Var::from_tensor(&uniform(&[2, 1, 4, 4], 0.05, 0.95, 93 + i)).unwrap())
        .collect();
    let mut errs: Errors = check_vars(&[("composite.pred".into(), pred.clone())], || {
        composite_loss(pred.as_tensor(), &gt, &w).unwrap()
    });

    let mut vars = vec![("total.final".to_string(), pred.clone()), ("total.quarter".to_string(), quarter.clone())];
    vars.extend(masks.iter().enumerate().map(|(i, m)| (format!("total.mask{i}"), m.clone())));
    errs.extend(check_vars(&vars, || {
        let mt: Vec<Tensor> = masks.iter().map(|m| m.as_tensor().clone()).collect();
        total_loss(pred.as_tensor(), quarter.as_tensor(), &mt, &gt, &w).unwrap().total
    }));
    errs
}

/// Every suite, labelled by component.
pub fn all() -> Vec<(&'static str, Errors)> {
    vec![
        ("uscaling adapter", adapter()),
        ("lora", lora()),
        ("cross attention", cross_attention()),
        ("encoder", encoder()),
        ("prompt soft path", prompt()),
        ("consistency decoder", decoder()),
        ("losses", losses()),
    ]
}
