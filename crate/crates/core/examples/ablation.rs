//! Runs an ablation protocol at toy scale and prints its table.
//!
//! ```text
//! cargo run --release --example ablation -- [overlap|lora_placement|lora_rank|components] [epochs]
//! ```

use urbansam::harness::{load_data, overlap_ablation, training_ablation, AblationKind};
use urbansam::train::{DataSpec, TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let kind: AblationKind = args.next().unwrap_or_else(|| "overlap".into()).parse()?;
    let epochs = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2);
    let cfg = TrainConfig {
        epochs,
        warmup_epochs: 1,
        data: DataSpec::Synthetic {
            class: urbansam::data::SceneClass::Building,
            train_count: 48,
            eval_count: 16,
            density: None,
            seed: 9,
        },
        ..TrainConfig::default()
    };
    let (train, eval) = load_data(&cfg.data, cfg.model.trunk.image_size)?;

    let table = match kind {
        AblationKind::Overlap => {
            let mut t = Trainer::new(cfg.clone())?;
            t.fit(&train, None, None, None, |_| {})?;
            overlap_ablation(t.model(), &eval, cfg.seed)?
        }
        _ => training_ablation(kind, &cfg, &train, &eval, |name, r| {
            eprintln!("[{name}] epoch {} loss {:.4}", r.epoch, r.loss_total)
        })?,
    };
    print!("{table}");
    Ok(())
}
