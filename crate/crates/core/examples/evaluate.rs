//! Scores a model on a manifest split, pooled (micro) and per-image (macro).

use urbansam::data::io::{write_image, write_mask};
use urbansam::data::{generate_synthetic, write_manifest, ManifestRecord, SceneClass, Split, SyntheticSceneSpec};
use urbansam::harness::{evaluate_manifest, load_data};
use urbansam::metrics::MetricsReport;
use urbansam::train::{DataSpec, TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut records = Vec::new();
    for i in 0..64u64 {
        let s = generate_synthetic(&SyntheticSceneSpec::new(SceneClass::Building, 64, 500 + i))?;
        let (img, msk) = (format!("b{i}.png"), format!("b{i}_mask.png"));
        write_image(&dir.path().join(&img), &s.image)?;
        write_mask(&dir.path().join(&msk), s.mask.as_ref().unwrap())?;
        let split = if i < 48 { Split::Train } else { Split::Test };
        records.push(ManifestRecord { image: img.into(), mask: Some(msk.into()), split });
    }
    let manifest = dir.path().join("manifest.jsonl");
    write_manifest(&manifest, &records)?;

    let cfg = TrainConfig {
        epochs: 6,
        data: DataSpec::Manifest { path: manifest.clone() },
        ..TrainConfig::default()
    };
    let (train, _) = load_data(&cfg.data, cfg.model.trunk.image_size)?;
    let mut trainer = Trainer::new(cfg)?;
    trainer.fit(&train, None, None, None, |r| println!("epoch {} loss {:.4}", r.epoch, r.loss_total))?;

    let acc = evaluate_manifest(trainer.model(), &manifest, Split::Test, 8)?;
    println!("{} test images", acc.len());
    println!("average,{}", MetricsReport::csv_header());
    println!("micro,{}", acc.micro().csv_row());
    println!("macro,{}", acc.macro_avg().csv_row());
    Ok(())
}
