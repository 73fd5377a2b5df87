//! Resampling of arbitrary-size inputs to the size the trunk expects, with
//! the inverse mapping for predictions.

use ndarray::{Array2, Array3, ArrayView2};

use super::raster::RasterSample;
use crate::error::{Error, Result};
use crate::loss::nearest_indices;
use crate::nn::bilinear_matrix;

fn matrix(n_in: usize, n_out: usize) -> Array2<f64> {
    Array2::from_shape_vec((n_out, n_in), bilinear_matrix(n_in, n_out)).expect("bilinear matrix shape")
}

/// Bilinear (half-pixel) resize of one plane.
pub fn resize_bilinear(plane: ArrayView2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    if (h, w) == (height, width) {
        return plane.to_owned();
    }
    matrix(h, height).dot(&plane).dot(&matrix(w, width).t())
}

/// Nearest-neighbour resize; keeps label values exact.
pub fn resize_nearest<T: Copy>(plane: ArrayView2<T>, height: usize, width: usize) -> Array2<T> {
    let (h, w) = plane.dim();
    let rows = nearest_indices(h, height);
    let cols = nearest_indices(w, width);
    Array2::from_shape_fn((height, width), |(i, j)| plane[[rows[i] as usize, cols[j] as usize]])
}

/// A sample brought to `target × target`. The image stays in `[0, 255]`
/// as floats so no rounding is introduced.
#[derive(Debug, Clone)]
pub struct Regulated {
    pub image: Array3<f64>,
    pub mask: Option<Array2<u8>>,
    pub native: (usize, usize),
}

impl Regulated {
    /// Maps a probability map on the regulated grid back to native size.
    pub fn restore(&self, prob: &Array2<f64>) -> Array2<f64> {
        let (h, w) = self.native;
        resize_bilinear(prob.view(), h, w)
    }

    pub fn restore_labels(&self, labels: &Array2<u8>) -> Array2<u8> {
        let (h, w) = self.native;
        resize_nearest(labels.view(), h, w)
    }
}

pub fn image_to_f64(image: &Array3<u8>) -> Array3<f64> {
    image.mapv(f64::from)
}

pub fn regulate_image(image: &Array3<f64>, target: usize) -> Array3<f64> {
    let (c, _, _) = image.dim();
    let mut out = Array3::zeros((c, target, target));
    for ch in 0..c {
        let plane = resize_bilinear(image.index_axis(ndarray::Axis(0), ch), target, target);
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&plane);
    }
    out
}

/// Image resampled bilinearly and mask by nearest neighbour to
/// `target × target`; `target` must be a multiple of `patch_size`.
pub fn regulate(sample: &RasterSample, target: usize, patch_size: usize) -> Result<Regulated> {
    if target == 0 || patch_size == 0 || !target.is_multiple_of(patch_size) {
        return Err(Error::config(format!(
            "regulate target {target} is not divisible by patch size {patch_size}"
        )));
    }
    sample.validate()?;
    Ok(Regulated {
        image: regulate_image(&image_to_f64(&sample.image), target),
        mask: sample.mask.as_ref().map(|m| resize_nearest(m.view(), target, target)),
        native: (sample.height(), sample.width()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_round_trip_at_integer_factor() {
        let m = Array2::from_shape_fn((32, 32), |(i, j)| ((i * 5 + j * 3) % 7 == 0) as u8);
        let up = resize_nearest(m.view(), 64, 64);
        assert_eq!(resize_nearest(up.view(), 32, 32), m);
    }

    #[test]
    fn indivisible_target_rejected() {
        let s = RasterSample::new(Array3::zeros((3, 8, 8)), None, "x").unwrap();
        assert!(matches!(regulate(&s, 1000, 16), Err(Error::Config(_))));
    }

    #[test]
    fn constant_stays_constant() {
        let s = RasterSample::new(Array3::from_elem((3, 40, 24), 77u8), Some(Array2::ones((40, 24))), "x").unwrap();
        let r = regulate(&s, 64, 16).unwrap();
        assert_eq!(r.image.dim(), (3, 64, 64));
        assert!(r.image.iter().all(|v| (v - 77.0).abs() < 1e-9));
        assert!(r.mask.as_ref().unwrap().iter().all(|v| *v == 1));
        let back = r.restore(&Array2::from_elem((64, 64), 0.25));
        assert_eq!(back.dim(), (40, 24));
        assert!(back.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }
}
