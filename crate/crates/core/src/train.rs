//! SGD training loop with warmup/exponential-decay schedule, per-epoch
//! checkpoints and bit-exact resume.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::ProjTarget;
use crate::data::{augment, RasterSample, SceneClass};
use crate::data::regulate::image_to_f64;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::{images_to_tensor, masks_to_tensor, ModelConfig, UrbanSam};
use crate::nn::{fnv1a, scalar_f64};

pub const RUN_FILE: &str = "run.json";
pub const STATE_FILE: &str = "state.json";
pub const MOMENTUM_FILE: &str = "momentum.bin";
pub const CHECKPOINT_DIR: &str = "checkpoint";
/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "URBANSAM_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    None,
    #[default]
    WarmupExp,
}

/// Where training samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic {
        class: SceneClass,
        train_count: usize,
        eval_count: usize,
        #[serde(default)]
        density: Option<f64>,
        seed: u64,
    },
    /// JSON-lines manifest; paths resolve against the manifest's directory.
    Manifest { path: PathBuf },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic {
            class: SceneClass::Building,
            train_count: 512,
            eval_count: 128,
            density: None,
            seed: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub decay_gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: Vec<ProjTarget>,
    pub loss: LossWeights,
    /// Random quarter turns and flips per sample and epoch.
    pub augment: bool,
    /// Stop once eval IoU reaches this value.
    pub target_iou: Option<f64>,
    /// Evaluate every this many epochs when eval data is given (0 = never).
    pub eval_every: usize,
    pub model: ModelConfig,
    pub data: DataSpec,
    pub output: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 50,
            warmup_epochs: 2,
            schedule: Schedule::WarmupExp,
            decay_gamma: 0.97,
            batch_size: 8,
            seed: 0,
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_targets: vec![ProjTarget::Q, ProjTarget::V],
            loss: LossWeights::default(),
            augment: true,
            target_iou: None,
            eval_every: 1,
            model: ModelConfig::default(),
            data: DataSpec::default(),
            output: PathBuf::from("runs/urbansam"),
        }
    }
}

impl TrainConfig {
    /// Per-task settings: water trains at a constant 0.001, roads and
    /// buildings at 0.005 with five warmup epochs and exponential decay.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let class = match name {
            "water" => SceneClass::Water,
            "road" => SceneClass::Road,
            "building" => SceneClass::Building,
            other => return Err(Error::config(format!("unknown preset `{other}` (expected water, road or building)"))),
        };
        let data = DataSpec::Synthetic {
            class,
            train_count: 512,
            eval_count: 128,
            density: None,
            seed: 1_000,
        };
        Ok(match class {
            SceneClass::Water => Self {
                lr: 0.001,
                schedule: Schedule::None,
                warmup_epochs: 0,
                data,
                ..base
            },
            _ => Self {
                lr: 0.005,
                schedule: Schedule::WarmupExp,
                warmup_epochs: 5,
                data,
                ..base
            },
        })
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Applies `URBANSAM_SEED` if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(Error::config(format!("decay_gamma must be in (0, 1], got {}", self.decay_gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.lora_targets.is_empty() {
            return Err(Error::config("lora_targets must name at least one projection"));
        }
        self.loss.validate()?;
        self.model_config().validate()
    }

    /// The model config with the LoRA fields of this config applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.lora.rank = self.lora_rank;
        m.lora.alpha = self.lora_alpha;
        m.lora.targets = self.lora_targets.clone();
        m
    }

    /// Learning rate for 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::None => self.lr,
            Schedule::WarmupExp => {
                let w = self.warmup_epochs;
                if epoch <= w {
                    self.lr * epoch as f64 / w as f64
                } else {
                    self.lr * self.decay_gamma.powi((epoch - w) as i32)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_final: f64,
    pub loss_quarter: f64,
    pub loss_mask: f64,
    pub wall_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<MetricsReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub stopped_early: bool,
}

impl RunRecord {
    pub fn last_eval(&self) -> Option<&MetricsReport> {
        self.epochs.iter().rev().find_map(|e| e.eval.as_ref())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    epoch: usize,
    config: TrainConfig,
}

/// Splits rasters into `size × size` tiles so every sample matches the
/// model input. Samples without masks are rejected.
pub fn prepare(samples: Vec<RasterSample>, size: usize) -> Result<Vec<RasterSample>> {
    let mut out = Vec::new();
    for s in samples {
        if s.mask.is_none() {
            return Err(Error::data(format!("sample `{}` has no mask", s.source_id)));
        }
        if s.height() == size && s.width() == size {
            out.push(s);
        } else {
            let spec = crate::data::TilingSpec::new(size, 0.0)?;
            out.extend(crate::data::tile(&s, &spec)?);
        }
    }
    Ok(out)
}

/// Model-ready batch tensors for `samples` (augmented when `aug_seed` is set).
pub fn batch_tensors(samples: &[&RasterSample], dtype: DType, aug_seed: Option<u64>) -> Result<(Tensor, Tensor)> {
    let owned: Vec<RasterSample> = match aug_seed {
        Some(seed) => samples
            .iter()
            .enumerate()
            .map(|(i, s)| augment(s, seed.wrapping_add(i as u64)))
            .collect(),
        None => samples.iter().map(|s| (*s).clone()).collect(),
    };
    let images: Vec<_> = owned.iter().map(|s| image_to_f64(&s.image)).collect();
    let masks: Vec<_> = owned
        .iter()
        .map(|s| s.mask.as_ref().ok_or_else(|| Error::data(format!("sample `{}` has no mask", s.source_id))))
        .collect::<Result<_>>()?;
    let x = images_to_tensor(&images.iter().collect::<Vec<_>>(), dtype)?;
    let y = masks_to_tensor(&masks, dtype)?;
    Ok((x, y))
}

/// Micro-pooled (and per-image) metrics of the model's 0.5-thresholded
/// predictions.
pub fn evaluate_samples(model: &UrbanSam, samples: &[RasterSample], batch_size: usize) -> Result<MetricsAccumulator> {
    let mut acc = MetricsAccumulator::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&RasterSample> = chunk.iter().collect();
        let (x, _) = batch_tensors(&refs, model.dtype(), None)?;
        let probs = crate::model::tensor_to_maps(&model.forward(&x)?.probability()?)?;
        for (p, s) in probs.iter().zip(chunk) {
            let pred: Vec<u8> = p.iter().map(|v| (*v > 0.5) as u8).collect();
            let gt = s.mask.as_ref().expect("prepared samples carry masks");
            acc.add(&pred, gt.as_slice().expect("standard layout"))?;
        }
    }
    Ok(acc)
}

pub struct Trainer {
    cfg: TrainConfig,
    model: UrbanSam,
    momentum: BTreeMap<String, Tensor>,
    epoch: usize,
    record: RunRecord,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = UrbanSam::new(cfg.model_config(), DType::F32, cfg.seed)?;
        Ok(Self {
            cfg,
            model,
            momentum: BTreeMap::new(),
            epoch: 0,
            record: RunRecord::default(),
        })
    }

    /// Picks up from a checkpoint directory written by [`Trainer::save`].
    pub fn resume(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainState = serde_json::from_str(&text)?;
        let (model, tensors) = UrbanSam::load(dir)?;
        let momentum = tensors
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix("momentum.").map(|n| (n.to_string(), v)))
            .collect();
        let path = dir.join(RUN_FILE);
        let record = match fs::read_to_string(&path) {
            Ok(t) => serde_json::from_str(&t)?,
            Err(_) => RunRecord::default(),
        };
        Ok(Self {
            cfg: state.config,
            model,
            momentum,
            epoch: state.epoch,
            record,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &UrbanSam {
        &self.model
    }

    pub fn into_model(self) -> UrbanSam {
        self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    /// One SGD step on a batch; returns (total, final, quarter, mask) losses.
    pub fn step(&mut self, x: &Tensor, y: &Tensor, lr: f64) -> Result<[f64; 4]> {
        let out = self.model.forward(x)?;
        let l = out.loss(y, &self.cfg.loss)?;
        let total = scalar_f64(&l.total)?;
        if !total.is_finite() {
            return Err(Error::numeric(
                format!("training loss at epoch {}", self.epoch + 1),
                format!("loss is {total}"),
            ));
        }
        let grads = l.total.backward()?;
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for (name, var) in self.model.store().trainable() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // detached so the buffers never hold on to the autograd graph
            let w = var.as_tensor().detach();
            let d = (g.detach() + (&w * wd)?)?;
            let v = match self.momentum.get(name) {
                Some(v) => ((v * mu)? + d)?,
                None => d,
            };
            var.set(&(&w - (&v * lr)?)?)?;
            self.momentum.insert(name.clone(), v);
        }
        Ok([
            total,
            scalar_f64(&l.final_term)?,
            scalar_f64(&l.quarter_term)?,
            scalar_f64(&l.mask_term)?,
        ])
    }

    /// Trains the next epoch over `data` in a seeded order.
    pub fn run_epoch(&mut self, data: &[RasterSample]) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::data("training set is empty"));
        }
        let epoch = self.epoch + 1;
        let lr = self.cfg.lr_at(epoch);
        let start = Instant::now();
        let epoch_seed = fnv1a(&(epoch as u64).to_le_bytes(), self.cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut sums = [0.0; 4];
        let mut batches = 0;
        for (bi, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let refs: Vec<&RasterSample> = idx.iter().map(|&i| &data[i]).collect();
            let aug = self
                .cfg
                .augment
                .then(|| epoch_seed.wrapping_add((bi * self.cfg.batch_size) as u64 * 0x9E37_79B9));
            let (x, y) = batch_tensors(&refs, self.model.dtype(), aug)?;
            let l = self.step(&x, &y, lr)?;
            for (s, v) in sums.iter_mut().zip(l) {
                *s += v;
            }
            batches += 1;
        }
        let n = batches as f64;
        self.epoch = epoch;
        Ok(EpochRecord {
            epoch,
            lr,
            loss_total: sums[0] / n,
            loss_final: sums[1] / n,
            loss_quarter: sums[2] / n,
            loss_mask: sums[3] / n,
            wall_secs: start.elapsed().as_secs_f64(),
            eval: None,
        })
    }

    /// Trains until `cfg.epochs` (or `stop_after`), evaluating and
    /// checkpointing as configured. A numeric failure leaves the last good
    /// checkpoint in place.
    pub fn fit(
        &mut self,
        train: &[RasterSample],
        eval: Option<&[RasterSample]>,
        out_dir: Option<&Path>,
        stop_after: Option<usize>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<&RunRecord> {
        let last = stop_after.unwrap_or(self.cfg.epochs).min(self.cfg.epochs);
        while self.epoch < last {
            let mut rec = self.run_epoch(train)?;
            let due = self.cfg.eval_every > 0 && (rec.epoch % self.cfg.eval_every == 0 || rec.epoch == self.cfg.epochs);
            if let (Some(ev), true) = (eval, due) {
                rec.eval = Some(evaluate_samples(&self.model, ev, self.cfg.batch_size)?.micro());
            }
            on_epoch(&rec);
            let reached = match (self.cfg.target_iou, &rec.eval) {
                (Some(t), Some(m)) => m.iou >= t,
                _ => false,
            };
            self.record.epochs.push(rec);
            if let Some(dir) = out_dir {
                self.save(dir)?;
            }
            if reached {
                self.record.stopped_early = true;
                if let Some(dir) = out_dir {
                    self.save(dir)?;
                }
                break;
            }
        }
        Ok(&self.record)
    }

    /// Writes the model, momentum buffers, trainer state and run record to
    /// `dir/checkpoint`, replacing the previous one only once complete.
    pub fn save(&mut self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let final_dir = dir.join(CHECKPOINT_DIR);
        let tmp = dir.join(format!("{CHECKPOINT_DIR}.tmp"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        let momentum = self
            .momentum
            .iter()
            .map(|(k, v)| (format!("momentum.{k}"), v.clone()))
            .collect();
        self.model.save(&tmp, vec![(MOMENTUM_FILE, momentum)])?;
        let state = TrainState {
            epoch: self.epoch,
            config: self.cfg.clone(),
        };
        let p = tmp.join(STATE_FILE);
        fs::write(&p, serde_json::to_string_pretty(&state)? + "\n").map_err(|e| Error::io(&p, e))?;
        self.record.checkpoint = Some(final_dir.clone());
        let p = tmp.join(RUN_FILE);
        fs::write(&p, serde_json::to_string_pretty(&self.record)? + "\n").map_err(|e| Error::io(&p, e))?;
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
        }
        fs::rename(&tmp, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
        let p = dir.join(RUN_FILE);
        fs::write(&p, serde_json::to_string_pretty(&self.record)? + "\n").map_err(|e| Error::io(&p, e))?;
        Ok(final_dir)
    }
}
