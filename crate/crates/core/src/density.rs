//! Cell-density maps: per-frame point counts on a square mesh, rendered as
//! an 8-bit-range raster with optional Gaussian smoothing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::raster::{Raster, MAX_INTENSITY};
use crate::{Error, PointSet, Result};

pub const DEFAULT_FRAME_SIZE: usize = 27;
pub const DEFAULT_BLUR_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub frame_size: usize,
    /// Mesh origin in source pixels; frames start at this offset.
    pub origin: (usize, usize),
    pub source_width: usize,
    pub source_height: usize,
    pub cols: usize,
    pub rows: usize,
    /// Row-major per-frame counts, `rows * cols` long.
    pub counts: Vec<u64>,
}

impl DensityGrid {
    pub fn count(&self, col: usize, row: usize) -> u64 {
        self.counts[row * self.cols + col]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Physical frame area given the source pixel size in µm.
    pub fn frame_area_um2(&self, um_per_px: f64) -> f64 {
        let side = self.frame_size as f64 * um_per_px;
        side * side
    }

    /// One line per mesh row, comma-separated counts.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.counts.chunks(self.cols.max(1)) {
            for (i, c) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// Counts points per `frame_size × frame_size` frame. Edge frames may be
/// partial.
pub fn bin_points(
    points: &PointSet,
    width: usize,
    height: usize,
    frame_size: usize,
) -> Result<DensityGrid> {
    if frame_size == 0 {
        return Err(Error::Validation("frame_size must be at least 1".into()));
    }
    points.check_bounds(width, height)?;
    let cols = width.div_ceil(frame_size);
    let rows = height.div_ceil(frame_size);
    let mut counts = vec![0u64; cols * rows];
    for p in points.iter() {
        let (c, r) = (p.x as usize / frame_size, p.y as usize / frame_size);
        counts[r * cols + c] += 1;
    }
    Ok(DensityGrid {
        frame_size,
        origin: (0, 0),
        source_width: width,
        source_height: height,
        cols,
        rows,
        counts,
    })
}

/// One pixel per frame. Counts are scaled so the maximum maps to 255, then
/// blurred with a Gaussian of `blur_sigma` frames (0 disables blurring).
pub fn render_density(grid: &DensityGrid, blur_sigma: f64) -> Result<Raster> {
    if !(blur_sigma >= 0.0 && blur_sigma.is_finite()) {
        return Err(Error::Validation(format!(
            "blur_sigma must be non-negative, got {blur_sigma}"
        )));
    }
    let max = grid.counts.iter().copied().max().unwrap_or(0);
    // Multiply before dividing so the maximum lands on exactly 255.
    let scaled: Vec<f64> = grid
        .counts
        .iter()
        .map(|&c| {
            if max == 0 {
                0.0
            } else {
                c as f64 * MAX_INTENSITY / max as f64
            }
        })
        .collect();
    let data = if blur_sigma > 0.0 {
        gaussian_blur(&scaled, grid.cols, grid.rows, blur_sigma)
    } else {
        scaled
    };
    Raster::new(grid.cols, grid.rows, data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable blur with zero padding outside the grid.
fn gaussian_blur(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut dst = vec![0.0; src.len()];
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let off = k as isize - radius;
                    let (sx, sy) = if horizontal {
                        (x as isize + off, y as isize)
                    } else {
                        (x as isize, y as isize + off)
                    };
                    if sx >= 0 && sy >= 0 && (sx as usize) < width && (sy as usize) < height {
                        acc += w * src[sy as usize * width + sx as usize];
                    }
                }
                dst[y * width + x] = acc.clamp(0.0, MAX_INTENSITY);
            }
        }
        dst
    };
    let tmp = pass(data, true);
    pass(&tmp, false)
}
