mod common;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::Rng;
use urbansam::alignment::{attention_row_sums, CrossAttnParams};
use urbansam::data::augment::Augmentation;
use urbansam::data::prompt_sim::{mask_iou, OVERLAP_TOLERANCE};
use urbansam::data::synthetic::{FG_MAX, FG_MIN};
use urbansam::data::{
    augment, generate_synthetic, simulate_prompt, stitch, tile, PromptKind, PromptSimSpec, RasterSample, SceneClass,
    SyntheticSceneSpec, TilingSpec,
};
use urbansam::loss::{bce_loss, dice_loss, downsample_nearest};
use urbansam::metrics::{compute_metrics, Confusion};
use urbansam::nn::{to_vec_f64, upsample_nearest, FeatureMap, ParamStore};

fn raster(h: usize, w: usize, seed: u64) -> RasterSample {
    let mut r = common::rng(seed);
    let image = Array3::from_shape_fn((3, h, w), |_| r.random_range(0..=255u8));
    let mask = Array2::from_shape_fn((h, w), |_| r.random_range(0..2u8));
    RasterSample::new(image, Some(mask), "prop").unwrap()
}

fn prob_map(h: usize, w: usize, seed: u64) -> Array2<f64> {
    let mut r = common::rng(seed);
    Array2::from_shape_fn((h, w), |_| r.random_range(0.0..1.0))
}

fn binary(len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..2, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tile_stitch_round_trip_without_overlap(h in 1usize..130, w in 1usize..130, seed in any::<u64>()) {
        let spec = TilingSpec::new(32, 0.0).unwrap();
        let prob = prob_map(h, w, seed);
        let windows = spec.windows(h, w).unwrap();
        let patches = windows.iter().map(|win| {
            let map = Array2::from_shape_fn((32, 32), |(i, j)| {
                if i < win.height && j < win.width { prob[[win.row + i, win.col + j]] } else { -1.0 }
            });
            (*win, map)
        });
        prop_assert_eq!(stitch(h, w, patches).unwrap(), prob);
    }

    #[test]
    fn constant_raster_survives_overlap(h in 1usize..100, w in 1usize..100, overlap in 0.0f64..0.9, v in 0.0f64..1.0) {
        let spec = TilingSpec::new(32, overlap).unwrap();
        let patches = spec.windows(h, w).unwrap().into_iter().map(|win| (win, Array2::from_elem((32, 32), v)));
        let out = stitch(h, w, patches).unwrap();
        prop_assert!(out.iter().all(|x| *x == v));
    }

    #[test]
    fn tiles_carry_source_pixels(h in 32usize..90, w in 32usize..90, overlap in 0.0f64..0.6, seed in any::<u64>()) {
        let r = raster(h, w, seed);
        for t in tile(&r, &TilingSpec::new(32, overlap).unwrap()).unwrap() {
            let win = t.window;
            for i in 0..win.height {
                for j in 0..win.width {
                    prop_assert_eq!(t.mask.as_ref().unwrap()[[i, j]], r.mask.as_ref().unwrap()[[win.row + i, win.col + j]]);
                    prop_assert_eq!(t.image[[1, i, j]], r.image[[1, win.row + i, win.col + j]]);
                }
            }
        }
    }

    #[test]
    fn augmentation_keeps_image_and_mask_paired(h in 1usize..24, w in 1usize..24, seed in any::<u64>(), aug in any::<u64>()) {
        let r = raster(h, w, seed);
        let a = augment(&r, aug);
        let op = Augmentation::from_seed(aug);
        prop_assert_eq!(a.mask.as_ref().unwrap(), &op.apply_plane(r.mask.as_ref().unwrap().view()));
        prop_assert_eq!(&a.image, &op.apply_image(&r.image));
        // the mask follows the same pixel permutation as every image plane
        let tagged = Array2::from_shape_fn((h, w), |(i, j)| (i * w + j) as u32);
        let perm = op.apply_plane(tagged.view());
        for ((i, j), src) in perm.indexed_iter() {
            let (si, sj) = (*src as usize / w, *src as usize % w);
            prop_assert_eq!(a.mask.as_ref().unwrap()[[i, j]], r.mask.as_ref().unwrap()[[si, sj]]);
            prop_assert_eq!(a.image[[2, i, j]], r.image[[2, si, sj]]);
        }
        let fg = |m: &Array2<u8>| m.iter().filter(|v| **v == 1).count();
        prop_assert_eq!(fg(a.mask.as_ref().unwrap()), fg(r.mask.as_ref().unwrap()));
    }

    #[test]
    fn f1_follows_from_iou(pred in binary(256), gt in binary(256)) {
        let m = compute_metrics(&pred, &gt).unwrap();
        if m.undefined.is_empty() {
            prop_assert!((m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() <= 1e-12);
        }
        for v in [m.oa, m.precision, m.recall, m.f1, m.iou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn confusion_counts_are_additive(a in binary(64), b in binary(64), c in binary(64), d in binary(64)) {
        let joint = Confusion::from_masks(&[a.clone(), c.clone()].concat(), &[b.clone(), d.clone()].concat()).unwrap();
        let split = Confusion::from_masks(&a, &b).unwrap() + Confusion::from_masks(&c, &d).unwrap();
        prop_assert_eq!(joint, split);
        prop_assert_eq!(joint.report(), split.report());
    }

    #[test]
    fn loss_ranges(p in prop::collection::vec(0.0f64..=1.0, 32), y in binary(32)) {
        let pt = Tensor::from_vec(p, (2, 1, 4, 4), &Device::Cpu).unwrap();
        let yt = Tensor::from_vec(y, (2, 1, 4, 4), &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap();
        let bce = bce_loss(&pt, &yt).unwrap().to_scalar::<f64>().unwrap();
        let dice = dice_loss(&pt, &yt, 1.0).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(bce >= 0.0 && bce.is_finite());
        prop_assert!((0.0..=1.0).contains(&dice));
    }

    #[test]
    fn nearest_downsample_stays_binary_and_inverts_doubling(y in binary(64), oh in 1usize..9, ow in 1usize..9) {
        let yt = Tensor::from_vec(y, (1, 1, 8, 8), &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap();
        let down = downsample_nearest(&yt, oh, ow).unwrap();
        prop_assert!(to_vec_f64(&down).unwrap().iter().all(|v| *v == 0.0 || *v == 1.0));
        let up = upsample_nearest(&yt, 2, 2).unwrap();
        let back = downsample_nearest(&up, 8, 8).unwrap();
        prop_assert_eq!(to_vec_f64(&back).unwrap(), to_vec_f64(&yt).unwrap());
    }

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..10_000, nv in 1usize..4, nu in 1usize..4, scale in 0.1f64..20.0) {
        let mut store = ParamStore::new(DType::F64, seed);
        let params = CrossAttnParams::new(&mut store, "p", 4, 3, 5).unwrap();
        let f_v = FeatureMap::new((common::uniform(&[2, 4, nv, 2], -1.0, 1.0, seed) * scale).unwrap(), 0, 4);
        let f_u = FeatureMap::new((common::uniform(&[2, 3, nu, 2], -1.0, 1.0, seed + 1) * scale).unwrap(), 0, 4);
        let a = params.attention(&f_v, &f_u).unwrap();
        for s in to_vec_f64(&attention_row_sums(&a).unwrap()).unwrap() {
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sum {}", s);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulated_prompts_hit_their_target(seed in 0u64..1000, target in prop::sample::select(vec![50u32, 70, 90, 100])) {
        let gt = generate_synthetic(&SyntheticSceneSpec::new(SceneClass::Building, 64, seed)).unwrap().mask.unwrap();
        prop_assume!(gt.iter().any(|v| *v == 1));
        for kind in PromptKind::ALL {
            let p = simulate_prompt(&gt, &PromptSimSpec::new(kind, target, seed)).unwrap();
            let goal = target as f64 / 100.0;
            prop_assert!((p.achieved - goal).abs() <= OVERLAP_TOLERANCE, "{kind} {target}: {}", p.achieved);
            if kind == PromptKind::Mask {
                prop_assert_eq!(mask_iou(&p.rasterize(64, 64), &gt), p.achieved);
            }
        }
    }
}

#[test]
fn synthetic_foreground_fraction_is_bounded() {
    for class in SceneClass::ALL {
        for seed in 0..100 {
            let s = generate_synthetic(&SyntheticSceneSpec::new(class, 64, seed)).unwrap();
            let f = s.foreground_fraction().unwrap();
            assert!((FG_MIN..=FG_MAX).contains(&f), "{class} seed {seed}: {f}");
        }
    }
}

#[test]
fn synthetic_scenes_are_reproducible() {
    let spec = SyntheticSceneSpec::new(SceneClass::Road, 48, 7);
    assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
}

/// Patch count by walking origins one stride at a time until the last
/// patch reaches the far edge.
fn brute_force_count(len: usize, patch: usize, stride: usize) -> usize {
    let mut n = 1;
    let mut origin = 0;
    while origin + patch < len {
        origin += stride;
        n += 1;
    }
    n
}

#[test]
fn half_overlap_on_1536_gives_25_patches() {
    let spec = TilingSpec::new(512, 0.5).unwrap();
    assert_eq!(spec.stride(), 256);
    let per_axis = brute_force_count(1536, 512, 256);
    assert_eq!(per_axis * per_axis, 25);
    assert_eq!(spec.windows(1536, 1536).unwrap().len(), 25);
    for len in [1usize, 31, 32, 33, 100, 513, 1024, 1537] {
        for overlap in [0.0, 0.01, 0.25, 0.5] {
            let s = TilingSpec::new(32, overlap).unwrap();
            assert_eq!(s.origins(len).len(), brute_force_count(len, 32, s.stride()), "len {len} overlap {overlap}");
        }
    }
}
