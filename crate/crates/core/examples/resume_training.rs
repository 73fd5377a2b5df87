//! Interrupting and resuming training reproduces the uninterrupted run.

use urbansam::harness::load_data;
use urbansam::train::{DataSpec, TrainConfig, Trainer, CHECKPOINT_DIR};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        data: DataSpec::Synthetic {
            class: urbansam::data::SceneClass::Road,
            train_count: 16,
            eval_count: 0,
            density: None,
            seed: 3,
        },
        ..TrainConfig::default()
    };
    let (train, _) = load_data(&cfg.data, cfg.model.trunk.image_size)?;

    let mut straight = Trainer::new(cfg.clone())?;
    let checksum = straight.model().trunk_checksum()?;
    straight.fit(&train, None, None, None, |_| {})?;

    let dir = tempfile::tempdir()?;
    let mut first = Trainer::new(cfg)?;
    first.fit(&train, None, Some(dir.path()), Some(1), |r| println!("first run: epoch {}", r.epoch))?;
    drop(first);
    let mut resumed = Trainer::resume(&dir.path().join(CHECKPOINT_DIR))?;
    resumed.fit(&train, None, Some(dir.path()), None, |r| println!("resumed:   epoch {}", r.epoch))?;

    let a = straight.model().param_tensors();
    let b = resumed.model().param_tensors();
    let same = a.iter().all(|(k, t)| {
        let x: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        let y: Vec<f32> = b[k].flatten_all().unwrap().to_vec1().unwrap();
        x == y
    });
    println!("{} tensors identical to the uninterrupted run: {same}", a.len());
    println!("trunk checksum unchanged: {}", resumed.model().trunk_checksum()? == checksum);
    Ok(())
}
