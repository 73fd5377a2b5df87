//! Renders one scene per class and writes image/mask PNGs.
//!
//! ```text
//! cargo run --example synthetic_scenes -- [out_dir] [size]
//! ```

use std::path::PathBuf;

use urbansam::data::io::{write_image, write_mask};
use urbansam::data::{generate_synthetic, SceneClass, SyntheticSceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/synthetic".into()));
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(128);
    std::fs::create_dir_all(&out)?;

    for class in SceneClass::ALL {
        for density in [0.2, 0.8] {
            let spec = SyntheticSceneSpec {
                density,
                ..SyntheticSceneSpec::new(class, size, 42)
            };
            let scene = generate_synthetic(&spec)?;
            let stem = format!("{class}_d{:02}", (density * 10.0) as u32);
            write_image(&out.join(format!("{stem}.png")), &scene.image)?;
            write_mask(&out.join(format!("{stem}_mask.png")), scene.mask.as_ref().unwrap())?;
            println!(
                "{stem:14} target fg {:.2}  actual fg {:.3}",
                spec.target_fraction(),
                scene.foreground_fraction().unwrap()
            );
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
