use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placement of a sample inside its source raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            row: 0,
            col: 0,
            height,
            width,
        }
    }
}

/// RGB image `[3, H, W]` with an optional `{0, 1}` mask `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterSample {
    pub image: Array3<u8>,
    pub mask: Option<Array2<u8>>,
    pub source_id: String,
    pub window: Window,
}

impl RasterSample {
    pub fn new(image: Array3<u8>, mask: Option<Array2<u8>>, source_id: impl Into<String>) -> Result<Self> {
        let (_, h, w) = image.dim();
        let s = Self {
            image,
            mask,
            source_id: source_id.into(),
            window: Window::full(h, w),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image.dim();
        if c != 3 {
            return Err(Error::data(format!("{}: image has {c} channels, expected 3", self.source_id)));
        }
        if let Some(m) = &self.mask {
            if m.dim() != (h, w) {
                return Err(Error::data(format!(
                    "{}: mask is {:?} but image is {h}x{w}",
                    self.source_id,
                    m.dim()
                )));
            }
            if let Some(v) = m.iter().find(|v| **v > 1) {
                return Err(Error::data(format!("{}: mask value {v} is not in {{0, 1}}", self.source_id)));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.image.dim().1
    }

    pub fn width(&self) -> usize {
        self.image.dim().2
    }

    pub fn foreground_fraction(&self) -> Option<f64> {
        self.mask
            .as_ref()
            .map(|m| m.iter().filter(|v| **v == 1).count() as f64 / m.len().max(1) as f64)
    }
}
