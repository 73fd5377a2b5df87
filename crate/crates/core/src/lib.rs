//! Parameter-efficient segmentation of urban scenes on top of a frozen
//! vision transformer.
//!
//! A multi-scale convolutional adapter runs beside the frozen trunk, and
//! LoRA factors plus masked cross attention align the two at every stage.
//! Stage masks fuse into a prompt for a hierarchical decoder. Everything
//! runs on the CPU through `candle`.
//!
//! ```no_run
//! use urbansam::harness::load_data;
//! use urbansam::{TrainConfig, Trainer};
//!
//! let cfg = TrainConfig::default().with_env_seed()?;
//! let (train, eval) = load_data(&cfg.data, cfg.model.trunk.image_size)?;
//! let mut trainer = Trainer::new(cfg)?;
//! trainer.fit(&train, Some(&eval), None, None, |r| println!("epoch {} loss {:.4}", r.epoch, r.loss_total))?;
//! # Ok::<(), urbansam::Error>(())
//! ```

pub mod alignment;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod train;
pub mod trunk;
pub mod uscaling;

pub use error::{Error, Result};
pub use model::{ModelConfig, UrbanSam};
pub use train::{TrainConfig, Trainer};
