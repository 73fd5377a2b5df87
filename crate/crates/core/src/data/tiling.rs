//! Fixed-size patching with overlap and averaging reassembly.

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::raster::{RasterSample, Window};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    #[default]
    Reflect,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TilingSpec {
    pub patch_size: usize,
    pub overlap_fraction: f64,
    #[serde(default)]
    pub pad_mode: PadMode,
}

pub const MIN_PATCH: usize = 32;

impl TilingSpec {
    pub fn new(patch_size: usize, overlap_fraction: f64) -> Result<Self> {
        let s = Self {
            patch_size,
            overlap_fraction,
            pad_mode: PadMode::Reflect,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < MIN_PATCH {
            return Err(Error::config(format!(
                "patch_size {} is below the minimum of {MIN_PATCH}",
                self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::config(format!(
                "overlap_fraction must lie in [0, 1), got {}",
                self.overlap_fraction
            )));
        }
        if self.stride() == 0 {
            return Err(Error::config("tiling stride rounds to zero"));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        (self.patch_size as f64 * (1.0 - self.overlap_fraction)).round() as usize
    }

    /// Patch origins along one axis of length `len`; the last patch may run
    /// past the edge and is padded.
    pub fn origins(&self, len: usize) -> Vec<usize> {
        let p = self.patch_size;
        let n = if len <= p { 1 } else { (len - p).div_ceil(self.stride()) + 1 };
        (0..n).map(|i| i * self.stride()).collect()
    }

    /// Row-major windows, clipped to the raster.
    pub fn windows(&self, height: usize, width: usize) -> Result<Vec<Window>> {
        self.validate()?;
        if height == 0 || width == 0 {
            return Err(Error::data(format!("cannot tile a degenerate {height}x{width} raster")));
        }
        let mut out = Vec::new();
        for r in self.origins(height) {
            for c in self.origins(width) {
                out.push(Window {
                    row: r,
                    col: c,
                    height: self.patch_size.min(height - r),
                    width: self.patch_size.min(width - c),
                });
            }
        }
        Ok(out)
    }
}

/// Index into `[0, n)` after reflecting `i` (which may lie outside) about
/// the edges without repeating the edge sample.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn cut<T: Copy + Default>(src: &Array2<T>, w: &Window, p: usize, pad: PadMode) -> Array2<T> {
    let (h, wd) = src.dim();
    Array2::from_shape_fn((p, p), |(i, j)| {
        let (r, c) = (w.row + i, w.col + j);
        if r < h && c < wd {
            src[[r, c]]
        } else {
            match pad {
                PadMode::Zero => T::default(),
                PadMode::Reflect => src[[reflect_index(r as isize, h), reflect_index(c as isize, wd)]],
            }
        }
    })
}

/// Splits a raster into `patch_size` squares in row-major order.
pub fn tile(raster: &RasterSample, spec: &TilingSpec) -> Result<Vec<RasterSample>> {
    raster.validate()?;
    let p = spec.patch_size;
    let windows = spec.windows(raster.height(), raster.width())?;
    let mut out = Vec::with_capacity(windows.len());
    for w in windows {
        let mut image = Array3::zeros((3, p, p));
        for c in 0..3 {
            let plane = raster.image.slice(s![c, .., ..]).to_owned();
            image.slice_mut(s![c, .., ..]).assign(&cut(&plane, &w, p, spec.pad_mode));
        }
        let mask = raster.mask.as_ref().map(|m| cut(m, &w, p, spec.pad_mode));
        out.push(RasterSample {
            image,
            mask,
            source_id: raster.source_id.clone(),
            window: Window {
                row: raster.window.row + w.row,
                col: raster.window.col + w.col,
                ..w
            },
        });
    }
    Ok(out)
}

/// Reassembles per-patch maps by uniform averaging. Each map's top-left
/// `window.height × window.width` block is placed at the window.
pub fn stitch<I>(height: usize, width: usize, patches: I) -> Result<Array2<f64>>
where
    I: IntoIterator<Item = (Window, Array2<f64>)>,
{
    let mut acc = Array2::<f64>::zeros((height, width));
    let mut count = Array2::<u32>::zeros((height, width));
    for (w, map) in patches {
        let (mh, mw) = map.dim();
        if w.row + w.height > height || w.col + w.width > width || mh < w.height || mw < w.width {
            return Err(Error::validation(format!(
                "window {w:?} with a {mh}x{mw} map does not fit a {height}x{width} raster"
            )));
        }
        let region = s![w.row..w.row + w.height, w.col..w.col + w.width];
        count.slice_mut(region).mapv_inplace(|c| c + 1);
        // running mean, so agreeing patches reproduce their value exactly
        ndarray::Zip::from(acc.slice_mut(region))
            .and(count.slice(region))
            .and(map.slice(s![..w.height, ..w.width]))
            .for_each(|a, &c, &v| *a += (v - *a) / c as f64);
    }
    let gaps: Vec<(usize, usize)> = count
        .indexed_iter()
        .filter(|(_, c)| **c == 0)
        .map(|(ij, _)| ij)
        .collect();
    if !gaps.is_empty() {
        let shown: Vec<String> = gaps.iter().take(8).map(|(r, c)| format!("({r},{c})")).collect();
        return Err(Error::validation(format!(
            "stitch leaves {} cells uncovered: {}{}",
            gaps.len(),
            shown.join(" "),
            if gaps.len() > 8 { " ..." } else { "" }
        )));
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster(h: usize, w: usize) -> RasterSample {
        let image = Array3::from_shape_fn((3, h, w), |(c, i, j)| ((c + 3 * i + 7 * j) % 256) as u8);
        RasterSample::new(image, None, "r").unwrap()
    }

    #[test]
    fn patch_counts() {
        let s = TilingSpec::new(512, 0.0).unwrap();
        assert_eq!(s.windows(1024, 1024).unwrap().len(), 4);
        let s = TilingSpec::new(512, 0.5).unwrap();
        assert_eq!(s.stride(), 256);
        assert_eq!(s.windows(1536, 1536).unwrap().len(), 25);
        assert_eq!(TilingSpec::new(32, 0.01).unwrap().stride(), 32);
    }

    #[test]
    fn identity_tiling() {
        let r = raster(64, 64);
        let t = tile(&r, &TilingSpec::new(64, 0.0).unwrap()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].image, r.image);
    }

    #[test]
    fn edge_patches_are_padded() {
        let r = raster(40, 70);
        let spec = TilingSpec {
            pad_mode: PadMode::Zero,
            ..TilingSpec::new(32, 0.0).unwrap()
        };
        let t = tile(&r, &spec).unwrap();
        assert_eq!(t.len(), 2 * 3);
        let last = &t[5];
        assert_eq!(last.window, Window { row: 32, col: 64, height: 8, width: 6 });
        assert_eq!(last.image[[0, 20, 20]], 0);
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(5, 5), 3);
    }

    #[test]
    fn degenerate_raster_rejected() {
        assert!(TilingSpec::new(32, 0.0).unwrap().windows(0, 10).is_err());
        assert!(TilingSpec::new(16, 0.0).is_err());
        assert!(TilingSpec::new(32, 1.0).is_err());
    }

    #[test]
    fn half_overlap_averages() {
        let a = (Window { row: 0, col: 0, height: 2, width: 2 }, Array2::zeros((2, 2)));
        let b = (Window { row: 0, col: 1, height: 2, width: 2 }, Array2::ones((2, 2)));
        let m = stitch(2, 3, [a, b]).unwrap();
        assert_eq!(m.row(0).to_vec(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn gaps_are_reported() {
        let a = (Window { row: 0, col: 0, height: 2, width: 2 }, Array2::zeros((2, 2)));
        let e = stitch(2, 3, [a]).unwrap_err().to_string();
        assert!(e.contains("2 cells uncovered"), "{e}");
        assert!(e.contains("(0,2)"));
    }
}
