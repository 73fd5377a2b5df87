//! Joint rotation/flip augmentation of image and mask.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::raster::RasterSample;

/// Counter-clockwise quarter turns followed by optional flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub quarter_turns: u8,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Augmentation {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            quarter_turns: rng.random_range(0..4),
            flip_h: rng.random(),
            flip_v: rng.random(),
        }
    }

    pub fn apply_plane<T: Copy>(&self, plane: ArrayView2<T>) -> Array2<T> {
        let mut v = plane;
        for _ in 0..self.quarter_turns % 4 {
            // rot90 ccw: transpose, then reverse rows
            v = v.reversed_axes();
            v.invert_axis(Axis(0));
        }
        if self.flip_h {
            v.invert_axis(Axis(1));
        }
        if self.flip_v {
            v.invert_axis(Axis(0));
        }
        v.to_owned()
    }

    pub fn apply_image<T: Copy>(&self, image: &Array3<T>) -> Array3<T> {
        let planes: Vec<Array2<T>> = image.outer_iter().map(|p| self.apply_plane(p)).collect();
        let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
        ndarray::stack(Axis(0), &views).expect("planes share a shape")
    }

    pub fn apply(&self, sample: &RasterSample) -> RasterSample {
        RasterSample {
            image: self.apply_image(&sample.image),
            mask: sample.mask.as_ref().map(|m| self.apply_plane(m.view())),
            source_id: sample.source_id.clone(),
            window: sample.window,
        }
    }
}

/// Applies the augmentation drawn from `seed` to image and mask together.
pub fn augment(sample: &RasterSample, seed: u64) -> RasterSample {
    Augmentation::from_seed(seed).apply(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane() -> Array2<u8> {
        Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as u8)
    }

    #[test]
    fn quarter_turn_matches_definition() {
        let p = plane();
        let r = Augmentation {
            quarter_turns: 1,
            ..Default::default()
        }
        .apply_plane(p.view());
        assert_eq!(r.dim(), (4, 3));
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(r[[i, j]], p[[j, 3 - i]]);
            }
        }
    }

    #[test]
    fn involutions() {
        let p = plane();
        let half = Augmentation {
            quarter_turns: 2,
            ..Default::default()
        };
        assert_eq!(half.apply_plane(half.apply_plane(p.view()).view()), p);
        let fh = Augmentation {
            flip_h: true,
            ..Default::default()
        };
        assert_eq!(fh.apply_plane(fh.apply_plane(p.view()).view()), p);
    }
}
