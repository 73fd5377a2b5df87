//! Tiling a raster into fixed patches and stitching per-patch maps back.

use ndarray::Array2;
use urbansam::data::{generate_synthetic, stitch, tile, PadMode, SceneClass, SyntheticSceneSpec, TilingSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = generate_synthetic(&SyntheticSceneSpec::new(SceneClass::Road, 150, 3))?;
    let mask = scene.mask.clone().unwrap();

    for (overlap, pad) in [(0.0, PadMode::Reflect), (0.25, PadMode::Reflect), (0.5, PadMode::Zero)] {
        let spec = TilingSpec {
            pad_mode: pad,
            ..TilingSpec::new(64, overlap)?
        };
        let tiles = tile(&scene, &spec)?;
        // feed each tile's own mask back in as its "prediction"
        let maps = tiles.iter().map(|t| (t.window, t.mask.as_ref().unwrap().mapv(f64::from)));
        let back = stitch(150, 150, maps)?;
        let exact = back == mask.mapv(f64::from);
        println!(
            "overlap {overlap:.2} stride {:3} pad {pad:?}: {} tiles, stitched mask exact: {exact}",
            spec.stride(),
            tiles.len()
        );
    }

    let half = TilingSpec::new(512, 0.5)?;
    println!("1536x1536 at 50% overlap: {} patches", half.windows(1536, 1536)?.len());

    let ramp = Array2::from_shape_fn((5, 7), |(i, j)| (i * 7 + j) as f64);
    let spec = TilingSpec::new(32, 0.0)?;
    let maps = spec.windows(5, 7)?.into_iter().map(|w| {
        let mut m = Array2::zeros((32, 32));
        m.slice_mut(ndarray::s![..5, ..7]).assign(&ramp);
        (w, m)
    });
    assert_eq!(stitch(5, 7, maps)?, ramp);
    println!("edge patch larger than the raster stitches back exactly");
    Ok(())
}
