//! Acceptance criteria, one line per criterion. Runs as a plain binary so
//! the training-based criteria can share one trained model.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::Rng;
use urbansam::alignment::{cross_masked_attention, CrossAttnParams};
use urbansam::data::augment::Augmentation;
use urbansam::data::prompt_sim::OVERLAP_TOLERANCE;
use urbansam::data::{simulate_prompt, stitch, tile, PromptKind, PromptSimSpec, RasterSample, TilingSpec};
use urbansam::harness::{load_data, prompted_metrics, scale_consistency, OVERLAP_TARGETS};
use urbansam::loss::{total_loss, LossWeights, BCE_EPS};
use urbansam::metrics::compute_metrics;
use urbansam::model::{ModelConfig, UrbanSam};
use urbansam::nn::{to_vec_f64, FeatureMap};
use urbansam::train::{TrainConfig, Trainer, CHECKPOINT_DIR};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    to_vec_f64(a)
        .unwrap()
        .iter()
        .zip(to_vec_f64(b).unwrap())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn lora_transparency() -> Outcome {
    let start = Instant::now();
    let with = UrbanSam::new(ModelConfig::default(), DType::F32, 17).map_err(|e| e.to_string())?;
    let mut plain_cfg = ModelConfig::default();
    plain_cfg.components.lora = false;
    let plain = UrbanSam::new(plain_cfg, DType::F32, 17).map_err(|e| e.to_string())?;
    check(with.param_count().trainable != plain.param_count().trainable, || {
        "LoRA and LoRA-free models have the same parameters".into()
    })?;
    let mut worst = 0.0f64;
    for i in 0..20 {
        let x = common::uniform(&[1, 3, 64, 64], -2.0, 2.0, 100 + i).to_dtype(DType::F32).unwrap();
        let a = with.forward(&x).unwrap();
        let b = plain.forward(&x).unwrap();
        worst = worst.max(max_abs_diff(&a.seg_logits, &b.seg_logits));
        worst = worst.max(max_abs_diff(&a.aux_logits, &b.aux_logits));
        worst = worst.max(max_abs_diff(&a.prompt_logits, &b.prompt_logits));
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-6, || format!("max abs diff {worst:e}"))?;
    check(secs < 10.0, || format!("took {secs:.1} s"))?;
    Ok(format!("max abs diff {worst:e} over 20 inputs in {secs:.1} s"))
}

fn mask_gating_identity() -> Outcome {
    for i in 0..20u64 {
        let mut store = urbansam::nn::ParamStore::new(DType::F64, i);
        let (dv, du, dc) = (2 + (i % 4) as usize, 1 + (i % 3) as usize, 3 + (i % 5) as usize);
        let params = CrossAttnParams::new(&mut store, "x", dv, du, dc).unwrap();
        let g = 1 + (i % 4) as usize;
        let f_v = FeatureMap::new(common::uniform(&[2, dv, g, g], -3.0, 3.0, 2 * i), 0, 16);
        let f_u = FeatureMap::new(common::uniform(&[2, du, g, g], -3.0, 3.0, 2 * i + 1), 0, 16);
        let m = Tensor::zeros((2, 1, g, g), DType::F64, &Device::Cpu).unwrap();
        let out = cross_masked_attention(&f_v, &f_u, &m, &params).unwrap();
        check(to_vec_f64(&out.data).unwrap() == to_vec_f64(&f_v.data).unwrap(), || {
            format!("instance {i} differs from f_v")
        })?;
    }
    Ok("m = 0 returned f_v exactly on 20 instances".into())
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut count = 0;
    for (component, errs) in common::gradcheck::all() {
        for (name, e) in errs {
            count += 1;
            if e.is_nan() || e > worst.1 {
                worst = (format!("{component}/{name}"), e);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst.1 <= common::FD_TOL, || format!("{} has relative error {:e}", worst.0, worst.1))?;
    check(secs < 300.0, || format!("took {secs:.0} s"))?;
    Ok(format!("{count} tensors, worst {:e} ({}) in {secs:.1} s", worst.1, worst.0))
}

/// Per-pixel loop with the textbook definitions.
fn oracle(pred: &[u8], gt: &[u8]) -> [f64; 5] {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..pred.len() {
        if pred[i] == 1 && gt[i] == 1 {
            tp += 1;
        } else if pred[i] == 1 {
            fp += 1;
        } else if gt[i] == 1 {
            fn_ += 1;
        } else {
            tn += 1;
        }
    }
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
    let p = div(tp, tp + fp);
    let r = div(tp, tp + fn_);
    [div(tp + tn, tp + fp + fn_ + tn), p, r, div(2.0 * p * r, p + r), div(tp, tp + fp + fn_)]
}

fn metric_oracle() -> Outcome {
    let mut rng = common::rng(4);
    for i in 0..100 {
        // vary the foreground rate so near-empty cases appear too
        let rate = rng.random_range(0.0..1.0);
        let pred: Vec<u8> = (0..256).map(|_| rng.random_bool(rate) as u8).collect();
        let gt: Vec<u8> = (0..256).map(|_| rng.random_bool(rate) as u8).collect();
        let m = compute_metrics(&pred, &gt).unwrap();
        let got = [m.oa, m.precision, m.recall, m.f1, m.iou];
        check(got == oracle(&pred, &gt), || format!("pair {i}: {got:?} vs {:?}", oracle(&pred, &gt)))?;
        if m.undefined.is_empty() {
            let gap = (m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs();
            check(gap <= 1e-12, || format!("pair {i}: F1/IoU gap {gap:e}"))?;
        }
    }
    Ok("100 random 16x16 pairs match the per-pixel oracle".into())
}

/// Plain-loop composite loss over `[B, H, W]` maps.
fn ref_loss(pred: &[f64], gt: &[f64], b: usize, w: &LossWeights) -> f64 {
    let n = pred.len();
    let per = n / b;
    let mut bce = 0.0;
    for i in 0..n {
        let p = pred[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
        bce -= gt[i] * p.ln() + (1.0 - gt[i]) * (1.0 - p).ln();
    }
    bce /= n as f64;
    let mut dice = 0.0;
    for s in 0..b {
        let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
        for i in s * per..(s + 1) * per {
            inter += pred[i] * gt[i];
            sp += pred[i];
            sy += gt[i];
        }
        dice += 1.0 - (2.0 * inter + w.dice_smooth) / (sp + sy + w.dice_smooth);
    }
    w.lambda_bce * bce + w.lambda_dice * dice / b as f64
}

/// Nearest-neighbour pick of `gt` (`[B, n, n]`) onto an `m × m` grid.
fn ref_down(gt: &[f64], b: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(b * m * m);
    for s in 0..b {
        for i in 0..m {
            for j in 0..m {
                out.push(gt[s * n * n + (i * n / m) * n + j * n / m]);
            }
        }
    }
    out
}

fn loss_composition() -> Outcome {
    let w = LossWeights::default();
    check(w.lambda_bce == 0.2 && w.lambda_dice == 0.8, || "default weights are not (0.2, 0.8)".into())?;
    let (b, n) = (2, 16);
    let mut worst = 0.0f64;
    for inst in 0..10u64 {
        let t = |shape: &[usize], seed| common::uniform(shape, 0.0, 1.0, 1000 * inst + seed);
        let gt = t(&[b, 1, n, n], 1).ge(0.5).unwrap().to_dtype(DType::F64).unwrap();
        let fin = t(&[b, 1, n, n], 2);
        let quarter = t(&[b, 1, n / 4, n / 4], 3);
        let sizes = [4, 4, 4, 4, 8];
        let masks: Vec<Tensor> = sizes.iter().enumerate().map(|(k, &s)| t(&[b, 1, s, s], 10 + k as u64)).collect();
        let got = total_loss(&fin, &quarter, &masks, &gt, &w).unwrap().total.to_scalar::<f64>().unwrap();

        let g = to_vec_f64(&gt).unwrap();
        let mut want = ref_loss(&to_vec_f64(&fin).unwrap(), &g, b, &w);
        want += ref_loss(&to_vec_f64(&quarter).unwrap(), &ref_down(&g, b, n, n / 4), b, &w);
        let mut masks_sum = 0.0;
        for (m, &s) in masks.iter().zip(&sizes) {
            masks_sum += ref_loss(&to_vec_f64(m).unwrap(), &ref_down(&g, b, n, s), b, &w);
        }
        want += masks_sum / 5.0;
        worst = worst.max((got - want).abs());
    }
    check(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("10 instances, max deviation {worst:e}"))
}

struct Trained {
    model: UrbanSam,
    eval: Vec<RasterSample>,
    seed: u64,
}

fn convergence(slot: &mut Option<Trained>) -> Outcome {
    let cfg = TrainConfig {
        target_iou: Some(0.90),
        ..TrainConfig::default()
    };
    check(cfg.epochs <= 50, || "default config trains for more than 50 epochs".into())?;
    let (train, eval) = load_data(&cfg.data, cfg.model.trunk.image_size).map_err(|e| e.to_string())?;
    check(train.len() == 512 && eval.len() == 128, || "unexpected split sizes".into())?;
    let start = Instant::now();
    let seed = cfg.seed;
    let mut t = Trainer::new(cfg).map_err(|e| e.to_string())?;
    t.fit(&train, Some(&eval), None, None, |r| {
        let iou = r.eval.as_ref().map(|m| m.iou).unwrap_or(f64::NAN);
        eprintln!("  epoch {:2}: loss {:.4} test IoU {iou:.4} ({:.1} s)", r.epoch, r.loss_total, r.wall_secs);
    })
    .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let epochs = t.epoch();
    let iou = t.record().last_eval().map(|m| m.iou).unwrap_or(0.0);
    *slot = Some(Trained {
        model: t.into_model(),
        eval,
        seed,
    });
    check(iou >= 0.90, || format!("test IoU {iou:.4} after {epochs} epochs"))?;
    check(secs <= 900.0, || format!("took {secs:.0} s"))?;
    Ok(format!("test IoU {iou:.4} after {epochs} epochs in {secs:.0} s"))
}

fn prompt_monotonicity(trained: Option<&Trained>) -> Outcome {
    let t = trained.ok_or("no trained model")?;
    let usable: Vec<RasterSample> = t
        .eval
        .iter()
        .filter(|s| s.mask.as_ref().is_some_and(|m| m.iter().any(|v| *v == 1)))
        .cloned()
        .collect();
    let mut means = Vec::new();
    for target in OVERLAP_TARGETS {
        let goal = target as f64 / 100.0;
        for (i, s) in usable.iter().enumerate() {
            let spec = PromptSimSpec::new(PromptKind::Mask, target, t.seed.wrapping_add(i as u64));
            let a = simulate_prompt(s.mask.as_ref().unwrap(), &spec).map_err(|e| e.to_string())?.achieved;
            check((a - goal).abs() <= OVERLAP_TOLERANCE, || format!("scene {i} at {target}%: achieved {a:.4}"))?;
        }
        let (mean, _) = prompted_metrics(&t.model, &usable, PromptKind::Mask, target, t.seed).map_err(|e| e.to_string())?;
        check((mean - goal).abs() <= OVERLAP_TOLERANCE, || format!("mean at {target}%: {mean:.4}"))?;
        means.push(mean);
    }
    check(means.windows(2).all(|w| w[0] > w[1]), || format!("not strictly decreasing: {means:?}"))?;
    let shown: Vec<String> = means.iter().map(|m| format!("{:.2}", 100.0 * m)).collect();
    Ok(format!("achieved {} on {} scenes", shown.join(" > "), usable.len()))
}

fn freeze_and_resume() -> Outcome {
    let cfg = TrainConfig {
        epochs: 2,
        ..common::tiny_config(8)
    };
    let (train, _) = load_data(&cfg.data, cfg.model.trunk.image_size).map_err(|e| e.to_string())?;
    let mut straight = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
    let before = straight.model().trunk_checksum().unwrap();
    straight.fit(&train, None, None, None, |_| {}).map_err(|e| e.to_string())?;
    let after = straight.model().trunk_checksum().unwrap();
    check(before == after, || format!("trunk checksum {before:x} became {after:x}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut first = Trainer::new(cfg).map_err(|e| e.to_string())?;
    first.fit(&train, None, Some(dir.path()), Some(1), |_| {}).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::resume(&dir.path().join(CHECKPOINT_DIR)).map_err(|e| e.to_string())?;
    resumed.fit(&train, None, None, None, |_| {}).map_err(|e| e.to_string())?;
    let a = straight.model().param_tensors();
    let b = resumed.model().param_tensors();
    for (name, t) in &a {
        check(to_vec_f64(t).unwrap() == to_vec_f64(&b[name]).unwrap(), || format!("{name} differs after resume"))?;
    }
    Ok(format!("trunk checksum {before:016x} unchanged; 1+1 epochs equal 2 epochs on {} tensors", a.len()))
}

fn scale_consistency_check(trained: Option<&Trained>) -> Outcome {
    let t = trained.ok_or("no trained model")?;
    let scores = scale_consistency(&t.model, &t.eval).map_err(|e| e.to_string())?;
    let ok = scores.iter().filter(|s| **s >= 0.80).count();
    let share = ok as f64 / scores.len() as f64;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    check(share >= 0.90, || format!("{ok}/{} scenes at IoU >= 0.80", scores.len()))?;
    Ok(format!("{ok}/{} scenes at agreement IoU >= 0.80 (min {min:.3})", scores.len()))
}

fn random_raster(h: usize, w: usize, rng: &mut impl Rng) -> RasterSample {
    let image = Array3::from_shape_fn((3, h, w), |_| rng.random_range(0..=255u8));
    let mask = Array2::from_shape_fn((h, w), |_| rng.random_range(0..2u8));
    RasterSample::new(image, Some(mask), "acceptance").unwrap()
}

fn pipeline_exactness() -> Outcome {
    let mut rng = common::rng(10);
    for (h, w) in [(64, 64), (100, 37), (129, 200), (33, 32)] {
        let spec = TilingSpec::new(32, 0.0).unwrap();
        let prob = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0));
        let raster = random_raster(h, w, &mut rng);
        let tiles = tile(&raster, &spec).unwrap();
        let patches = tiles.iter().map(|t| {
            let map = Array2::from_shape_fn((32, 32), |(i, j)| {
                let (r, c) = (t.window.row + i, t.window.col + j);
                if r < h && c < w {
                    prob[[r, c]]
                } else {
                    0.5
                }
            });
            (t.window, map)
        });
        check(stitch(h, w, patches).unwrap() == prob, || format!("{h}x{w} round trip differs"))?;
    }
    let spec = TilingSpec::new(512, 0.5).unwrap();
    let n = spec.windows(1536, 1536).unwrap().len();
    check(spec.stride() == 256 && n == 25, || format!("stride {} gave {n} patches", spec.stride()))?;

    let ops = [
        ("180 degrees", Augmentation { quarter_turns: 2, ..Default::default() }),
        ("horizontal flip", Augmentation { flip_h: true, ..Default::default() }),
        ("vertical flip", Augmentation { flip_v: true, ..Default::default() }),
    ];
    let quarter = Augmentation { quarter_turns: 1, ..Default::default() };
    for i in 0..50 {
        let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
        let s = random_raster(h, w, &mut rng);
        for (name, op) in &ops {
            let twice = op.apply(&op.apply(&s));
            check(twice == s, || format!("{name} twice is not the identity on sample {i}"))?;
        }
        let full = quarter.apply(&quarter.apply(&quarter.apply(&quarter.apply(&s))));
        check(full == s, || format!("four quarter turns changed sample {i}"))?;
    }
    Ok("round trip exact on 4 rasters; 25 patches at stride 256; involutions hold on 50 samples".into())
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:2} {tag}  {name}: {detail}");
    outcome.is_ok()
}

fn main() -> ExitCode {
    let mut trained: Option<Trained> = None;
    let results = [
        run(1, "zero-init LoRA transparency", lora_transparency),
        run(2, "mask-gating identity", mask_gating_identity),
        run(3, "gradient suite", gradient_suite),
        run(4, "metric oracle", metric_oracle),
        run(5, "loss composition", loss_composition),
        run(6, "synthetic convergence", || convergence(&mut trained)),
        run(7, "prompt degradation monotonicity", || prompt_monotonicity(trained.as_ref())),
        run(8, "freeze and resume audit", freeze_and_resume),
        run(9, "scale consistency", || scale_consistency_check(trained.as_ref())),
        run(10, "pipeline exactness", pipeline_exactness),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
