//! Evaluation, tiled prediction and the ablation protocols.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;

use crate::data::io::{load_split, write_mask, write_probability};
use crate::data::prompt_sim::mask_iou;
use crate::data::synthetic::{generate_synthetic, SyntheticSceneSpec};
use crate::data::{read_image, read_manifest, regulate, simulate_prompt, stitch, tile, PromptKind, PromptSimSpec, RasterSample, Split, TilingSpec};
use crate::error::{Error, Result};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::{images_to_tensor, masks_to_tensor, tensor_to_maps, Components, LoraPlacement, UrbanSam};
use crate::train::{evaluate_samples, prepare, DataSpec, TrainConfig, Trainer};

/// Offset between the train and eval seed ranges of synthetic data.
pub const EVAL_SEED_OFFSET: u64 = 1 << 32;

/// Train and eval samples for `spec`, tiled to `size × size`.
pub fn load_data(spec: &DataSpec, size: usize) -> Result<(Vec<RasterSample>, Vec<RasterSample>)> {
    match spec {
        DataSpec::Synthetic {
            class,
            train_count,
            eval_count,
            density,
            seed,
        } => {
            let gen = |count: usize, base: u64| -> Result<Vec<RasterSample>> {
                (0..count as u64)
                    .map(|i| {
                        let mut s = SyntheticSceneSpec::new(*class, size, base.wrapping_add(i));
                        if let Some(d) = density {
                            s.density = *d;
                        }
                        generate_synthetic(&s)
                    })
                    .collect()
            };
            Ok((gen(*train_count, *seed)?, gen(*eval_count, seed.wrapping_add(EVAL_SEED_OFFSET))?))
        }
        DataSpec::Manifest { path } => {
            let records = read_manifest(path)?;
            let train = prepare(load_split(&records, Split::Train, true)?, size)?;
            let mut eval = load_split(&records, Split::Val, true)?;
            if eval.is_empty() {
                eval = load_split(&records, Split::Test, true)?;
            }
            Ok((train, prepare(eval, size)?))
        }
    }
}

/// Metrics of a checkpoint on one manifest split.
pub fn evaluate_manifest(model: &UrbanSam, manifest: &Path, split: Split, batch_size: usize) -> Result<MetricsAccumulator> {
    let records = read_manifest(manifest)?;
    let samples = load_split(&records, split, true)?;
    if samples.is_empty() {
        return Err(Error::data(format!("{}: split `{split:?}` is empty", manifest.display())));
    }
    let size = model.config().trunk.image_size;
    evaluate_samples(model, &prepare(samples, size)?, batch_size)
}

/// Foreground probability for a raster of any size: tile, regulate each
/// tile to the model input, predict, restore and stitch.
pub fn predict_raster(model: &UrbanSam, raster: &RasterSample, tiling: &TilingSpec, batch_size: usize) -> Result<Array2<f64>> {
    let size = model.config().trunk.image_size;
    let patch = model.config().trunk.patch_size;
    let tiles = tile(raster, tiling)?;
    let mut maps = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(batch_size.max(1)) {
        let regs = chunk.iter().map(|t| regulate(t, size, patch)).collect::<Result<Vec<_>>>()?;
        let images: Vec<_> = regs.iter().map(|r| &r.image).collect();
        let probs = tensor_to_maps(&model.forward(&images_to_tensor(&images, model.dtype())?)?.probability()?)?;
        for ((t, r), p) in chunk.iter().zip(&regs).zip(probs) {
            let local = crate::data::Window {
                row: t.window.row - raster.window.row,
                col: t.window.col - raster.window.col,
                ..t.window
            };
            maps.push((local, r.restore(&p)));
        }
    }
    stitch(raster.height(), raster.width(), maps)
}

pub fn threshold(prob: &Array2<f64>) -> Array2<u8> {
    prob.mapv(|p| (p > 0.5) as u8)
}

/// Writes `<stem>_prob.png` and `<stem>_mask.png` for `input` into `out_dir`.
pub fn predict_file(model: &UrbanSam, input: &Path, out_dir: &Path, tiling: &TilingSpec) -> Result<(PathBuf, PathBuf)> {
    let image = read_image(input)?;
    let raster = RasterSample::new(image, None, input.display().to_string())?;
    let prob = predict_raster(model, &raster, tiling, 8)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("prediction");
    let p = out_dir.join(format!("{stem}_prob.png"));
    let m = out_dir.join(format!("{stem}_mask.png"));
    write_probability(&p, &prob)?;
    write_mask(&m, &threshold(&prob))?;
    Ok((p, m))
}

/// A CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_csv())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Overlap,
    LoraPlacement,
    LoraRank,
    Components,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [
        AblationKind::Overlap,
        AblationKind::LoraPlacement,
        AblationKind::LoraRank,
        AblationKind::Components,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Overlap => "overlap",
            AblationKind::LoraPlacement => "lora_placement",
            AblationKind::LoraRank => "lora_rank",
            AblationKind::Components => "components",
        }
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation kind `{s}` (expected overlap, lora_placement, lora_rank or components)")))
    }
}

pub const OVERLAP_TARGETS: [u32; 4] = [100, 90, 70, 50];
pub const RANKS: [usize; 4] = [1, 4, 8, 16];

const METRIC_COLS: [&str; 5] = ["OA", "Precision", "Recall", "F1", "IoU"];

/// Mean achieved prompt overlap and the model's metrics when every sample
/// is driven by a simulated prompt of `kind` at `target` percent.
pub fn prompted_metrics(model: &UrbanSam, samples: &[RasterSample], kind: PromptKind, target: u32, seed: u64) -> Result<(f64, MetricsReport)> {
    let mut acc = MetricsAccumulator::new();
    let mut overlap = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let gt = s.mask.as_ref().ok_or_else(|| Error::data(format!("sample `{}` has no mask", s.source_id)))?;
        let spec = PromptSimSpec::new(kind, target, seed.wrapping_add(i as u64));
        let sim = simulate_prompt(gt, &spec)?;
        overlap += sim.achieved;
        let (h, w) = gt.dim();
        let prompt = sim.rasterize(h, w);
        let x = images_to_tensor(&[&crate::data::regulate::image_to_f64(&s.image)], model.dtype())?;
        let p = masks_to_tensor(&[&prompt], model.dtype())?;
        let prob = &tensor_to_maps(&model.forward_with_prompt(&x, &p)?.probability()?)?[0];
        acc.add(threshold(prob).as_slice().expect("standard layout"), gt.as_slice().expect("standard layout"))?;
    }
    Ok((overlap / samples.len() as f64, acc.micro()))
}

/// Prompt columns for each kind at each overlap target, then the learned
/// prompter's row. Samples with empty ground truth are skipped since
/// point and box prompts need a foreground.
pub fn overlap_ablation(model: &UrbanSam, samples: &[RasterSample], seed: u64) -> Result<Table> {
    let usable: Vec<RasterSample> = samples
        .iter()
        .filter(|s| s.mask.as_ref().is_some_and(|m| m.iter().any(|v| *v == 1)))
        .cloned()
        .collect();
    if usable.is_empty() {
        return Err(Error::data("overlap ablation needs samples with foreground"));
    }
    let mut header = vec!["Overlap".to_string()];
    for k in PromptKind::ALL {
        let kn = capitalize(k.name());
        header.push(format!("{kn}_Achieved"));
        header.extend(METRIC_COLS.iter().map(|m| format!("{kn}_{m}")));
    }
    let mut table = Table {
        header,
        rows: Vec::new(),
    };
    for target in OVERLAP_TARGETS {
        let mut row = vec![format!("{target}%")];
        for kind in PromptKind::ALL {
            let (achieved, m) = prompted_metrics(model, &usable, kind, target, seed)?;
            row.push(format!("{:.2}", 100.0 * achieved));
            row.extend(m.percent_cells());
        }
        table.push(row);
    }
    let own = evaluate_samples(model, &usable, 8)?.micro();
    let mut row = vec!["Our".to_string(), "-".to_string()];
    row.extend(own.percent_cells());
    row.extend(std::iter::repeat_n("-".to_string(), 12));
    table.push(row);
    Ok(table)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

/// One trained variant of an ablation.
#[derive(Debug, Clone)]
pub struct Variant {
    /// Leading label cells of the CSV row.
    pub labels: Vec<String>,
    pub config: TrainConfig,
}

/// Variants of `base` for a training ablation, in the table's row order.
pub fn variants(kind: AblationKind, base: &TrainConfig) -> Result<(Vec<&'static str>, Vec<Variant>)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    Ok(match kind {
        AblationKind::Overlap => return Err(Error::config("the overlap ablation does not train variants")),
        AblationKind::LoraPlacement => (
            vec!["Image Encoder", "Mask Decoder"],
            LoraPlacement::ALL
                .into_iter()
                .map(|p| Variant {
                    labels: vec![
                        if p.encoder() { "LoRA" } else { "frozen" }.to_string(),
                        if p.decoder() { "LoRA" } else { "fine-tune" }.to_string(),
                    ],
                    config: with(&|c| c.model.lora.placement = p),
                })
                .collect(),
        ),
        AblationKind::LoraRank => (
            vec!["Rank Size"],
            RANKS
                .into_iter()
                .map(|r| Variant {
                    labels: vec![r.to_string()],
                    config: with(&|c| {
                        c.lora_rank = r;
                        c.lora_alpha = 2.0 * r as f64;
                    }),
                })
                .collect(),
        ),
        AblationKind::Components => {
            let off = |f: fn(&mut Components)| {
                with(&|c| {
                    let mut comp = c.model.components;
                    f(&mut comp);
                    c.model.components = comp;
                })
            };
            (
                vec!["Method"],
                vec![
                    Variant {
                        labels: vec!["w/o LoRA".into()],
                        config: off(|c| c.lora = false),
                    },
                    Variant {
                        labels: vec!["w/o MultiScale".into()],
                        config: off(|c| c.multiscale = false),
                    },
                    Variant {
                        labels: vec!["w/o Interaction".into()],
                        config: off(|c| c.interaction = false),
                    },
                    Variant {
                        labels: vec!["w/o Decoder".into()],
                        config: off(|c| c.decoder = false),
                    },
                    Variant {
                        labels: vec!["full".into()],
                        config: base.clone(),
                    },
                ],
            )
        }
    })
}

/// Trains every variant on the same data and tabulates eval metrics and
/// learnable parameter counts (millions).
pub fn training_ablation(
    kind: AblationKind,
    base: &TrainConfig,
    train: &[RasterSample],
    eval: &[RasterSample],
    mut progress: impl FnMut(&str, &crate::train::EpochRecord),
) -> Result<Table> {
    let (labels, vars) = variants(kind, base)?;
    let mut header: Vec<&str> = labels;
    header.extend(METRIC_COLS);
    header.push("Learnable (M)");
    let mut table = Table::new(&header);
    for v in vars {
        let mut cfg = v.config.clone();
        cfg.eval_every = 0;
        let mut t = Trainer::new(cfg)?;
        let name = v.labels.join("/");
        t.fit(train, None, None, None, |r| progress(&name, r))?;
        let m = evaluate_samples(t.model(), eval, base.batch_size)?.micro();
        let mut row = v.labels.clone();
        row.extend(m.percent_cells());
        row.push(format!("{:.4}", t.model().param_count().learnable_millions()));
        table.push(row);
    }
    Ok(table)
}

/// Per-scene agreement between predictions on each scene and on its 2×
/// bilinear upsample (tiled at the model size, then averaged back down).
pub fn scale_consistency(model: &UrbanSam, samples: &[RasterSample]) -> Result<Vec<f64>> {
    let size = model.config().trunk.image_size;
    let tiling = TilingSpec::new(size, 0.0)?;
    samples
        .iter()
        .map(|s| {
            let base = threshold(&predict_raster(model, s, &tiling, 8)?);
            let up = crate::data::regulate::regulate_image(&crate::data::regulate::image_to_f64(&s.image), 2 * s.height());
            let up = RasterSample::new(up.mapv(|v| v.round().clamp(0.0, 255.0) as u8), None, s.source_id.clone())?;
            let big = predict_raster(model, &up, &tiling, 8)?;
            let back = threshold(&crate::data::regulate::resize_bilinear(big.view(), s.height(), s.width()));
            Ok(agreement(&base, &back))
        })
        .collect()
}

/// IoU of two binary maps, 1 when both are empty.
pub fn agreement(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    if a.iter().chain(b.iter()).all(|v| *v == 0) {
        1.0
    } else {
        mask_iou(a, b)
    }
}
