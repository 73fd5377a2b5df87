//! Predicts a raster larger than the model input by tiling, resizing each
//! tile to the model size, and stitching the probabilities.

use ndarray::{s, Array3};
use urbansam::data::{generate_synthetic, RasterSample, SceneClass, SyntheticSceneSpec, TilingSpec};
use urbansam::harness::{predict_raster, threshold};
use urbansam::model::{ModelConfig, UrbanSam};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // a 2x3 mosaic of 96-pixel scenes, cropped to an awkward size
    let mut image = Array3::<u8>::zeros((3, 192, 288));
    for r in 0..2 {
        for c in 0..3 {
            let tile = generate_synthetic(&SyntheticSceneSpec::new(SceneClass::Building, 96, (r * 3 + c) as u64))?;
            image.slice_mut(s![.., r * 96..(r + 1) * 96, c * 96..(c + 1) * 96]).assign(&tile.image);
        }
    }
    let raster = RasterSample::new(image.slice(s![.., ..181, ..277]).to_owned(), None, "mosaic")?;

    let model = match std::env::args().nth(1) {
        Some(dir) => UrbanSam::load(dir.as_ref())?.0,
        None => UrbanSam::new(ModelConfig::default(), candle_core::DType::F32, 0)?,
    };
    for overlap in [0.0, 0.25] {
        let tiling = TilingSpec::new(96, overlap)?;
        let t = std::time::Instant::now();
        let prob = predict_raster(&model, &raster, &tiling, 8)?;
        let fg = threshold(&prob).iter().filter(|v| **v == 1).count();
        println!(
            "overlap {overlap:.2}: {} tiles, {:?} map, {fg} foreground pixels, {:.2}s",
            tiling.windows(181, 277)?.len(),
            prob.dim(),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
