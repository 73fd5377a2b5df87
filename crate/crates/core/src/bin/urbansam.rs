use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use urbansam::data::io::{write_image, write_mask};
use urbansam::data::synthetic::{generate_synthetic, SyntheticSceneSpec};
use urbansam::data::{write_manifest, ManifestRecord, PadMode, SceneClass, Split, TilingSpec};
use urbansam::error::{Error, Result};
use urbansam::harness::{self, AblationKind};
use urbansam::metrics::MetricsReport;
use urbansam::model::UrbanSam;
use urbansam::train::{TrainConfig, Trainer, CHECKPOINT_DIR};

#[derive(Parser)]
#[command(name = "urbansam", version, about = "Train, evaluate and run urban-scene segmentation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config (or a per-task preset).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// water, road or building
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Continue from `<dir>/checkpoint`.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Average per-image scores instead of pooling counts.
        #[arg(long = "macro")]
        macro_avg: bool,
        /// Directory for metrics.json and metrics.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tile, predict and stitch a raster into probability and mask PNGs.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 512)]
        patch_size: usize,
        #[arg(long, default_value_t = 0.0)]
        overlap: f64,
        #[arg(long, value_enum, default_value = "reflect")]
        pad: PadArg,
        #[arg(long, default_value = "predictions")]
        out: PathBuf,
    },
    /// Run one of the ablation protocols and write a CSV.
    Ablate {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trained model for the overlap ablation (trained from the config when absent).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic scenes and a JSON-lines manifest.
    Synth {
        #[arg(long = "class")]
        class: SceneClass,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        density: Option<f64>,
        /// Share of scenes assigned to the test split.
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PadArg {
    Reflect,
    Zero,
}

fn load_config(config: Option<&Path>, preset: Option<&str>) -> Result<TrainConfig> {
    let cfg = match (config, preset) {
        (Some(p), _) => TrainConfig::from_json_file(p)?,
        (None, Some(name)) => TrainConfig::preset(name)?,
        (None, None) => TrainConfig::default(),
    };
    cfg.with_env_seed()
}

fn print_epoch(r: &urbansam::train::EpochRecord) {
    let eval = r
        .eval
        .as_ref()
        .map(|m| format!(" iou {:.4} f1 {:.4}", m.iou, m.f1))
        .unwrap_or_default();
    eprintln!(
        "epoch {:3} lr {:.5} loss {:.4} (final {:.4} quarter {:.4} masks {:.4}){eval} {:.1}s",
        r.epoch, r.lr, r.loss_total, r.loss_final, r.loss_quarter, r.loss_mask, r.wall_secs
    );
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("metrics.json");
    std::fs::write(&p, report.to_json()? + "\n").map_err(|e| Error::io(&p, e))?;
    let p = dir.join("metrics.csv");
    let csv = format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row());
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            preset,
            resume,
            epochs,
            out,
        } => {
            let mut trainer = match &resume {
                Some(dir) => Trainer::resume(&dir.join(CHECKPOINT_DIR))?,
                None => {
                    let mut cfg = load_config(config.as_deref(), preset.as_deref())?;
                    if let Some(o) = &out {
                        cfg.output = o.clone();
                    }
                    if let Some(e) = epochs {
                        cfg.epochs = e;
                        cfg.warmup_epochs = cfg.warmup_epochs.min(e);
                    }
                    Trainer::new(cfg)?
                }
            };
            let cfg = trainer.config().clone();
            let out_dir = resume.or(out).unwrap_or(cfg.output.clone());
            let (train, eval) = harness::load_data(&cfg.data, cfg.model.trunk.image_size)?;
            let stop = epochs.filter(|_| trainer.epoch() > 0).map(|e| trainer.epoch() + e);
            let record = trainer.fit(&train, Some(&eval), Some(&out_dir), stop, print_epoch)?;
            if let Some(m) = record.last_eval() {
                println!("{}", m.to_json()?);
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            macro_avg,
            out,
        } => {
            let (model, _) = UrbanSam::load(&checkpoint)?;
            let acc = harness::evaluate_manifest(&model, &manifest, split, 8)?;
            let report = if macro_avg { acc.macro_avg() } else { acc.micro() };
            if let Some(dir) = out {
                write_report(&dir, &report)?;
            }
            println!("{}", report.to_json()?);
            Ok(())
        }
        Command::Predict {
            checkpoint,
            input,
            patch_size,
            overlap,
            pad,
            out,
        } => {
            let (model, _) = UrbanSam::load(&checkpoint)?;
            let mut tiling = TilingSpec::new(patch_size, overlap)?;
            tiling.pad_mode = match pad {
                PadArg::Reflect => PadMode::Reflect,
                PadArg::Zero => PadMode::Zero,
            };
            let (p, m) = harness::predict_file(&model, &input, &out, &tiling)?;
            println!("{}\n{}", p.display(), m.display());
            Ok(())
        }
        Command::Ablate {
            kind,
            config,
            checkpoint,
            epochs,
            out,
        } => {
            let kind: AblationKind = kind.parse()?;
            let mut cfg = load_config(config.as_deref(), None)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
                cfg.warmup_epochs = cfg.warmup_epochs.min(e);
            }
            let (train, eval) = harness::load_data(&cfg.data, cfg.model.trunk.image_size)?;
            let table = match kind {
                AblationKind::Overlap => {
                    let model = match checkpoint {
                        Some(dir) => UrbanSam::load(&dir)?.0,
                        None => {
                            let mut t = Trainer::new(cfg.clone())?;
                            t.fit(&train, Some(&eval), None, None, print_epoch)?;
                            t.into_model()
                        }
                    };
                    harness::overlap_ablation(&model, &eval, cfg.seed)?
                }
                _ => harness::training_ablation(kind, &cfg, &train, &eval, |name, r| {
                    eprint!("[{name}] ");
                    print_epoch(r);
                })?,
            };
            let path = out.unwrap_or_else(|| PathBuf::from(format!("ablation_{}.csv", kind.name())));
            table.write(&path)?;
            print!("{table}");
            Ok(())
        }
        Command::Synth {
            class,
            count,
            size,
            seed,
            density,
            test_fraction,
            out,
        } => {
            if !(0.0..=1.0).contains(&test_fraction) {
                return Err(Error::config(format!("test_fraction must be in [0, 1], got {test_fraction}")));
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let n_test = (count as f64 * test_fraction).round() as usize;
            let mut records = Vec::with_capacity(count);
            for i in 0..count {
                let mut spec = SyntheticSceneSpec::new(class, size, seed.wrapping_add(i as u64));
                if let Some(d) = density {
                    spec.density = d;
                }
                let s = generate_synthetic(&spec)?;
                let image = PathBuf::from(format!("{}_{i:05}.png", class.name()));
                let mask = PathBuf::from(format!("{}_{i:05}_mask.png", class.name()));
                write_image(&out.join(&image), &s.image)?;
                write_mask(&out.join(&mask), s.mask.as_ref().expect("synthetic scenes carry masks"))?;
                records.push(ManifestRecord {
                    image,
                    mask: Some(mask),
                    split: if i + n_test >= count { Split::Test } else { Split::Train },
                });
            }
            let path = out.join("manifest.jsonl");
            write_manifest(&path, &records)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
