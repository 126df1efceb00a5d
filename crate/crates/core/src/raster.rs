//! Real-valued grayscale rasters and their PNG/TIFF I/O.
//!
//! Intensities are kept as `f64` in `[0, 255]` so that repeated diffusion
//! steps never quantize; rounding to 8 bits happens only in [`save_raster`].

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageError};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAX_INTENSITY: f64 = 255.0;

/// Row-major 2D intensity field.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    spacing: f64,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Validation(format!(
                "raster data has {} values, expected {width}x{height}",
                data.len()
            )));
        }
        if let Some(bad) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > MAX_INTENSITY)
        {
            return Err(Error::Validation(format!(
                "raster value {bad} outside [0, 255]"
            )));
        }
        Ok(Self {
            width,
            height,
            spacing: 1.0,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    /// Grid spacing `h`. Defaults to 1.0.
    pub fn with_spacing(mut self, spacing: f64) -> Result<Self> {
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::Validation(format!(
                "spacing must be positive, got {spacing}"
            )));
        }
        self.spacing = spacing;
        Ok(self)
    }

    /// Builds a raster from values already known to satisfy the invariants.
    pub(crate) fn from_parts(width: usize, height: usize, spacing: f64, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            spacing,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// 2x2 box-average downsampling. Odd trailing rows/columns are dropped and
    /// the spacing doubles.
    pub fn downsample2(&self) -> Result<Raster> {
        let (w, h) = (self.width / 2, self.height / 2);
        if w == 0 || h == 0 {
            return Err(Error::Validation(format!(
                "cannot downsample a {}x{} raster",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (2 * x, 2 * y);
                let sum = self.get(sx, sy)
                    + self.get(sx + 1, sy)
                    + self.get(sx, sy + 1)
                    + self.get(sx + 1, sy + 1);
                data.push(sum / 4.0);
            }
        }
        Ok(Raster::from_parts(w, h, self.spacing * 2.0, data))
    }

    /// Quantizes to 8 bits, rounding half-up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, MAX_INTENSITY) as u8
}

/// How colour inputs are reduced to a single channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrayMode {
    /// 0.299 R + 0.587 G + 0.114 B
    #[default]
    Luminance,
    R,
    G,
    B,
}

impl std::str::FromStr for GrayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "luminance" => Ok(GrayMode::Luminance),
            "r" => Ok(GrayMode::R),
            "g" => Ok(GrayMode::G),
            "b" => Ok(GrayMode::B),
            other => Err(Error::Validation(format!("unknown gray mode {other:?}"))),
        }
    }
}

impl GrayMode {
    /// Integer weights in thousandths keep `(v, v, v) -> v` exact.
    pub fn convert(self, rgb: [u8; 3]) -> f64 {
        let [r, g, b] = rgb.map(u32::from);
        match self {
            GrayMode::Luminance => f64::from(299 * r + 587 * g + 114 * b) / 1000.0,
            GrayMode::R => f64::from(r),
            GrayMode::G => f64::from(g),
            GrayMode::B => f64::from(b),
        }
    }
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster> {
    load_raster_with(path, GrayMode::Luminance)
}

/// Loads 8/16-bit grayscale or 8-bit RGB PNG/TIFF. 16-bit values are rescaled
/// linearly onto `[0, 255]`.
pub fn load_raster_with(path: impl AsRef<Path>, mode: GrayMode) -> Result<Raster> {
    let path = path.as_ref();
    let image = image::open(path).map_err(|e| image_error(path, e))?;
    let (width, height) = (image.width() as usize, image.height() as usize);
    let data: Vec<f64> = match image {
        DynamicImage::ImageLuma8(img) => img.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma16(img) => img
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) * MAX_INTENSITY / f64::from(u16::MAX))
            .collect(),
        DynamicImage::ImageRgb8(img) => img.pixels().map(|p| mode.convert(p.0)).collect(),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported color model {:?}", other.color()),
            ))
        }
    };
    Raster::new(width, height, data)
}

/// Writes an 8-bit grayscale image; the container follows the file extension.
pub fn save_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let image = GrayImage::from_raw(raster.width as u32, raster.height as u32, raster.to_u8())
        .expect("buffer length matches dimensions");
    image.save(path).map_err(|e| image_error(path, e))
}

fn image_error(path: &Path, err: ImageError) -> Error {
    match err {
        ImageError::IoError(source) => Error::io(path, source),
        other => Error::format(path, other.to_string()),
    }
}
