//! PNG/TIFF rasters and the JSON-lines dataset manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::raster::RasterSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub split: Split,
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader.with_guessed_format().map_err(|e| Error::io(path, e))?.decode().map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 8-bit RGB image as `[3, H, W]`.
pub fn read_image(path: &Path) -> Result<Array3<u8>> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        rgb.get_pixel(j as u32, i as u32)[c]
    }))
}

/// Single-channel mask; `{0, 255}` (or `{0, 1}`) mapped to `{0, 1}`.
pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let g = open(path)?.to_luma8();
    let (w, h) = g.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, p) in g.enumerate_pixels() {
        out[[y as usize, x as usize]] = match p[0] {
            0 => 0,
            1 | 255 => 1,
            v => {
                return Err(Error::data(format!(
                    "{}: mask pixel ({y}, {x}) has value {v}, expected 0 or 255",
                    path.display()
                )))
            }
        };
    }
    Ok(out)
}

pub fn write_image(path: &Path, image: &Array3<u8>) -> Result<()> {
    let (_, h, w) = image.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        Rgb([image[[0, i, j]], image[[1, i, j]], image[[2, i, j]]])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_gray(path: &Path, plane: &Array2<u8>) -> Result<()> {
    let (h, w) = plane.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([plane[[y as usize, x as usize]]]));
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// `{0, 1}` mask written as `{0, 255}`.
pub fn write_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    write_gray(path, &mask.mapv(|v| if v > 0 { 255 } else { 0 }))
}

/// Probability `p` stored as `floor(255 p + 0.5)`.
pub fn prob_to_u8(p: f64) -> u8 {
    (255.0 * p.clamp(0.0, 1.0) + 0.5).floor() as u8
}

pub fn write_probability(path: &Path, prob: &Array2<f64>) -> Result<()> {
    write_gray(path, &prob.mapv(prob_to_u8))
}

/// Reads a manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        rec.image = base.join(&rec.image);
        rec.mask = rec.mask.map(|m| base.join(m));
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_record(rec: &ManifestRecord) -> Result<RasterSample> {
    let image = read_image(&rec.image)?;
    let mask = rec.mask.as_deref().map(read_mask).transpose()?;
    RasterSample::new(image, mask, rec.image.display().to_string())
}

/// Loads every sample of one split; `require_masks` turns a missing mask
/// into a data error.
pub fn load_split(records: &[ManifestRecord], split: Split, require_masks: bool) -> Result<Vec<RasterSample>> {
    let mut out = Vec::new();
    for rec in records.iter().filter(|r| r.split == split) {
        if require_masks && rec.mask.is_none() {
            return Err(Error::data(format!("{} has no mask in split {split:?}", rec.image.display())));
        }
        out.push(load_record(rec)?);
    }
    Ok(out)
}
