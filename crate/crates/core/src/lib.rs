//! Cell-center detection in grayscale histology rasters.
//!
//! The pipeline smooths intra-soma intensity variation with explicit
//! Perona-Malik diffusion, extracts the surviving local minima and filters
//! them by intensity and by the area of the dark blob they sit in. Around it
//! sit rater-agreement metrics, density maps and a synthetic generator with
//! known ground truth.
//!
//! ```no_run
//! use neundiff::{detection, raster};
//!
//! let image = raster::load_raster("section.png").unwrap();
//! let found = detection::detect(&image, &detection::DetectionParams::default());
//! println!("{} cells", found.points.len());
//! ```

pub mod density;
pub mod detection;
pub mod diffusion;
mod error;
pub mod metrics;
pub mod points;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};
pub use points::{Point, PointSet};
pub use raster::Raster;
