//! Seeded generator of histology-like rasters with known cell centres.
//!
//! Each cell is a truncated Gaussian well, `background - depth * exp(-r²/2σ²)`
//! with `σ = diameter / 4`, cut off at the soma radius. Overlapping cells
//! combine by taking the darker value. Correlated noise inside each soma
//! creates spurious local minima; small dark Gaussian speckles away from the
//! cells act as artifacts that are not part of the ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::raster::{Raster, MAX_INTENSITY};
use crate::{Error, Point, PointSet, Result};

const MAX_ATTEMPTS: usize = 10_000;
/// Minimum clearance between somata that are not part of a touching pair.
const CELL_GAP: f64 = 3.0;
const SPECKLE_GAP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub n_cells: usize,
    /// Soma diameter range in pixels.
    pub diameter_min: f64,
    pub diameter_max: f64,
    /// Range of the intensity at the cell centre.
    pub center_min: f64,
    pub center_max: f64,
    pub background: f64,
    /// Fraction of cells that belong to a touching pair.
    pub touching_fraction: f64,
    /// Peak amplitude of the intra-soma noise, in intensity units.
    pub noise_amplitude: f64,
    pub speckle_count: usize,
    pub speckle_radius_min: f64,
    pub speckle_radius_max: f64,
    pub speckle_min: f64,
    pub speckle_max: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            n_cells: 100,
            diameter_min: 9.0,
            diameter_max: 30.0,
            center_min: 30.0,
            center_max: 110.0,
            background: 230.0,
            touching_fraction: 0.2,
            noise_amplitude: 15.0,
            speckle_count: 30,
            speckle_radius_min: 0.5,
            speckle_radius_max: 1.5,
            speckle_min: 40.0,
            speckle_max: 110.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let intensity = |name: &str, v: f64| {
            if (0.0..=MAX_INTENSITY).contains(&v) {
                Ok(())
            } else {
                Err(Error::Validation(format!(
                    "{name} must lie in [0, 255], got {v}"
                )))
            }
        };
        for (name, v) in [
            ("center_min", self.center_min),
            ("center_max", self.center_max),
            ("background", self.background),
            ("speckle_min", self.speckle_min),
            ("speckle_max", self.speckle_max),
            ("noise_amplitude", self.noise_amplitude),
        ] {
            intensity(name, v)?;
        }
        let ordered = |name: &str, lo: f64, hi: f64| {
            if lo <= hi {
                Ok(())
            } else {
                Err(Error::Validation(format!(
                    "{name} range is empty: [{lo}, {hi}]"
                )))
            }
        };
        ordered("diameter", self.diameter_min, self.diameter_max)?;
        ordered("center", self.center_min, self.center_max)?;
        ordered(
            "speckle radius",
            self.speckle_radius_min,
            self.speckle_radius_max,
        )?;
        ordered("speckle intensity", self.speckle_min, self.speckle_max)?;
        if self.diameter_min < 3.0 {
            return Err(Error::Validation(format!(
                "diameter_min must be at least 3, got {}",
                self.diameter_min
            )));
        }
        if self.center_max > self.background {
            return Err(Error::Validation(
                "cell centres must be darker than the background".into(),
            ));
        }
        if self.speckle_radius_min <= 0.0 {
            return Err(Error::Validation("speckle radius must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.touching_fraction) {
            return Err(Error::Validation(format!(
                "touching_fraction must lie in [0, 1], got {}",
                self.touching_fraction
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation(
                "raster dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A soma with an integer-pixel centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub x: u32,
    pub y: u32,
    pub diameter: f64,
    /// Intensity at the centre of the noise-free profile.
    pub center: f64,
}

impl Cell {
    pub fn radius(&self) -> f64 {
        self.diameter / 2.0
    }

    pub fn sigma(&self) -> f64 {
        self.diameter / 4.0
    }

    /// Full width at half maximum of the darkening profile.
    pub fn profile_fwhm(&self) -> f64 {
        2.0 * (2.0 * std::f64::consts::LN_2).sqrt() * self.sigma()
    }

    fn distance(&self, x: f64, y: f64) -> f64 {
        ((f64::from(self.x) - x).powi(2) + (f64::from(self.y) - y).powi(2)).sqrt()
    }

    /// Darkening weight in `[0, 1]` at distance `r`, or `None` outside the soma.
    fn weight(&self, r: f64) -> Option<f64> {
        (r <= self.radius()).then(|| (-r * r / (2.0 * self.sigma() * self.sigma())).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speckle {
    /// Sub-pixel centre.
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    /// Intensity at the centre.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synth {
    pub raster: Raster,
    /// The same scene without intra-soma noise.
    pub clean: Raster,
    pub truth: PointSet,
    pub cells: Vec<Cell>,
    pub speckles: Vec<Speckle>,
}

pub fn generate(spec: &SynthSpec) -> Result<Synth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cells = place_cells(spec, &mut rng)?;
    let speckles = place_speckles(spec, &cells, &mut rng)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    let noise = noise_field(spec.width, spec.height, &mut noise_rng);
    render(spec, &cells, &speckles, &noise)
}

/// Renders an explicit scene. Useful when cell positions must be controlled.
pub fn render_scene(spec: &SynthSpec, cells: &[Cell], speckles: &[Speckle]) -> Result<Synth> {
    spec.validate()?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    let noise = noise_field(spec.width, spec.height, &mut noise_rng);
    render(spec, cells, speckles, &noise)
}

fn render(spec: &SynthSpec, cells: &[Cell], speckles: &[Speckle], noise: &[f64]) -> Result<Synth> {
    let (w, h) = (spec.width, spec.height);
    let mut clean = vec![spec.background; w * h];
    // Weight of the cell currently defining each pixel; scales the noise.
    let mut owner_weight = vec![0.0; w * h];

    for cell in cells {
        let r = cell.radius();
        let depth = spec.background - cell.center;
        let (x0, x1) = clip_range(f64::from(cell.x), r, w);
        let (y0, y1) = clip_range(f64::from(cell.y), r, h);
        for y in y0..y1 {
            for x in x0..x1 {
                let Some(weight) = cell.weight(cell.distance(x as f64, y as f64)) else {
                    continue;
                };
                let v = spec.background - depth * weight;
                let i = y * w + x;
                if v < clean[i] {
                    clean[i] = v;
                    owner_weight[i] = weight;
                }
            }
        }
    }

    let mut noisy: Vec<f64> = clean
        .iter()
        .zip(&owner_weight)
        .zip(noise)
        .map(|((&v, &wgt), &n)| v + spec.noise_amplitude * wgt * n)
        .collect();

    for s in speckles {
        // Same truncated-Gaussian shape as a soma, so the darkest pixel is unique.
        let sigma2 = (s.radius / 2.0).powi(2);
        let (x0, x1) = clip_range(s.x, s.radius, w);
        let (y0, y1) = clip_range(s.y, s.radius, h);
        for y in y0..y1 {
            for x in x0..x1 {
                let r2 = (x as f64 - s.x).powi(2) + (y as f64 - s.y).powi(2);
                if r2 <= s.radius * s.radius {
                    let v = spec.background
                        - (spec.background - s.value) * (-r2 / (2.0 * sigma2)).exp();
                    let i = y * w + x;
                    clean[i] = clean[i].min(v);
                    noisy[i] = noisy[i].min(v);
                }
            }
        }
    }

    let clamp = |v: Vec<f64>| v.into_iter().map(|x| x.clamp(0.0, MAX_INTENSITY)).collect();
    let truth = PointSet::new(
        cells.iter().map(|c| Point::new(c.x, c.y)).collect(),
        "truth",
    )?;
    truth.check_bounds(w, h)?;
    Ok(Synth {
        raster: Raster::new(w, h, clamp(noisy))?,
        clean: Raster::new(w, h, clamp(clean))?,
        truth,
        cells: cells.to_vec(),
        speckles: speckles.to_vec(),
    })
}

fn clip_range(center: f64, radius: f64, len: usize) -> (usize, usize) {
    let lo = (center - radius).floor().max(0.0) as usize;
    let hi = ((center + radius).ceil() + 1.0).clamp(0.0, len as f64) as usize;
    (lo.min(len), hi)
}

/// White noise in `[-1, 1]` smoothed by a separable `[1 2 1] / 4` kernel and
/// rescaled to unit peak magnitude. The smoothing gives blobs a couple of
/// pixels across, like uneven dye uptake.
fn noise_field(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let smooth = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let at = |dx: isize| {
                    let (sx, sy) = if horizontal {
                        ((x as isize + dx).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + dx).clamp(0, h as isize - 1) as usize)
                    };
                    src[sy * w + sx]
                };
                dst[y * w + x] = 0.25 * at(-1) + 0.5 * at(0) + 0.25 * at(1);
            }
        }
        dst
    };
    let mut field = smooth(&smooth(&white, true), false);
    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        field.iter_mut().for_each(|v| *v /= peak);
    }
    field
}

fn random_cell(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let diameter = rng.random_range(spec.diameter_min..=spec.diameter_max);
    let center = rng.random_range(spec.center_min..=spec.center_max);
    (diameter, center)
}

fn fits(spec: &SynthSpec, x: f64, y: f64, r: f64) -> bool {
    let margin = r + 1.0;
    x >= margin && y >= margin && x + margin < spec.width as f64 && y + margin < spec.height as f64
}

fn clear_of(cells: &[Cell], candidate: &Cell, gap: f64) -> bool {
    cells.iter().all(|c| {
        c.distance(f64::from(candidate.x), f64::from(candidate.y))
            >= c.radius() + candidate.radius() + gap
    })
}

fn place_cells(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Cell>> {
    let n_pairs = ((spec.touching_fraction * spec.n_cells as f64 / 2.0).round() as usize)
        .min(spec.n_cells / 2);
    let n_single = spec.n_cells - 2 * n_pairs;
    let mut cells: Vec<Cell> = Vec::with_capacity(spec.n_cells);
    let place_error = || {
        Error::Validation(format!(
            "could not place {} cells in a {}x{} raster after {MAX_ATTEMPTS} attempts",
            spec.n_cells, spec.width, spec.height
        ))
    };

    for _ in 0..n_pairs {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let (d1, c1) = random_cell(spec, rng);
            let (d2, c2) = random_cell(spec, rng);
            let x1 = rng.random_range(0..spec.width) as f64;
            let y1 = rng.random_range(0..spec.height) as f64;
            let dist = rng.random_range(0.8..=1.1) * (d1 + d2) / 2.0;
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let x2 = (x1 + dist * angle.cos()).round();
            let y2 = (y1 + dist * angle.sin()).round();
            if !(fits(spec, x1, y1, d1 / 2.0) && fits(spec, x2, y2, d2 / 2.0)) {
                continue;
            }
            let a = Cell {
                x: x1 as u32,
                y: y1 as u32,
                diameter: d1,
                center: c1,
            };
            let b = Cell {
                x: x2 as u32,
                y: y2 as u32,
                diameter: d2,
                center: c2,
            };
            if (a.x, a.y) == (b.x, b.y)
                || !clear_of(&cells, &a, CELL_GAP)
                || !clear_of(&cells, &b, CELL_GAP)
            {
                continue;
            }
            cells.push(a);
            cells.push(b);
            placed = true;
            break;
        }
        if !placed {
            return Err(place_error());
        }
    }

    for _ in 0..n_single {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let (d, c) = random_cell(spec, rng);
            let x = rng.random_range(0..spec.width) as f64;
            let y = rng.random_range(0..spec.height) as f64;
            if !fits(spec, x, y, d / 2.0) {
                continue;
            }
            let cell = Cell {
                x: x as u32,
                y: y as u32,
                diameter: d,
                center: c,
            };
            if clear_of(&cells, &cell, CELL_GAP) {
                cells.push(cell);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(place_error());
        }
    }
    Ok(cells)
}

fn place_speckles(spec: &SynthSpec, cells: &[Cell], rng: &mut ChaCha8Rng) -> Result<Vec<Speckle>> {
    let mut speckles: Vec<Speckle> = Vec::with_capacity(spec.speckle_count);
    for _ in 0..spec.speckle_count {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let radius = rng.random_range(spec.speckle_radius_min..=spec.speckle_radius_max);
            let value = rng.random_range(spec.speckle_min..=spec.speckle_max);
            let x = rng.random_range(0.0..spec.width as f64);
            let y = rng.random_range(0.0..spec.height as f64);
            let clear_cells = cells
                .iter()
                .all(|c| c.distance(x, y) >= c.radius() + radius + SPECKLE_GAP);
            let clear_speckles = speckles.iter().all(|s| {
                ((s.x - x).powi(2) + (s.y - y).powi(2)).sqrt() >= s.radius + radius + SPECKLE_GAP
            });
            if clear_cells && clear_speckles {
                speckles.push(Speckle {
                    x,
                    y,
                    radius,
                    value,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Validation(format!(
                "could not place {} speckles after {MAX_ATTEMPTS} attempts",
                spec.speckle_count
            )));
        }
    }
    Ok(speckles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::count_strict_minima;

    #[test]
    fn empty_scene_is_background() {
        let s = generate(&SynthSpec {
            n_cells: 0,
            speckle_count: 0,
            width: 40,
            height: 30,
            ..Default::default()
        })
        .unwrap();
        assert!(s.raster.data().iter().all(|&v| v == 230.0));
        assert!(s.truth.is_empty());
    }

    #[test]
    fn deterministic_for_seed() {
        let spec = SynthSpec {
            seed: 7,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.raster, c.raster);
    }

    #[test]
    fn counts_and_pairs() {
        let s = generate(&SynthSpec::default()).unwrap();
        assert_eq!(s.truth.len(), 100);
        assert_eq!(s.speckles.len(), 30);
        // The first 20 cells form 10 touching pairs.
        for pair in s.cells[..20].chunks(2) {
            let d = pair[0].distance(f64::from(pair[1].x), f64::from(pair[1].y));
            let sum = pair[0].radius() + pair[1].radius();
            assert!(d >= 0.8 * sum - 1.0 && d <= 1.1 * sum + 1.0, "{d} vs {sum}");
        }
    }

    #[test]
    fn truth_centres_are_strict_minima_of_clean_profile() {
        let s = generate(&SynthSpec {
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        for p in s.truth.iter() {
            let (x, y) = (p.x as usize, p.y as usize);
            let v = s.clean.get(x, y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx, dy) != (0, 0) {
                        let n = s
                            .clean
                            .get((x as i64 + dx) as usize, (y as i64 + dy) as usize);
                        assert!(n > v, "centre ({x}, {y}) not strict");
                    }
                }
            }
        }
    }

    #[test]
    fn noise_adds_spurious_minima() {
        let spec = SynthSpec {
            speckle_count: 0,
            seed: 11,
            ..Default::default()
        };
        let s = generate(&spec).unwrap();
        assert_eq!(count_strict_minima(&s.clean), 100);
        assert!(count_strict_minima(&s.raster) > 100);
    }

    #[test]
    fn infeasible_placement_errors() {
        let spec = SynthSpec {
            width: 40,
            height: 40,
            n_cells: 50,
            ..Default::default()
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn validation() {
        assert!(generate(&SynthSpec {
            diameter_min: 2.0,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            center_max: 240.0,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            touching_fraction: 1.5,
            ..Default::default()
        })
        .is_err());
    }
}
