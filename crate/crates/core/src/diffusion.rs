//! Explicit finite-difference Perona-Malik diffusion on an 8-neighbour stencil.
//!
//! One step updates every pixel from the previous buffer only:
//!
//! ```text
//! u'(c) = u(c) + rate * Σ_d w_d * g(δ_d², λ) * δ_d,   δ_d = u(n_d) - u(c)
//! ```
//!
//! with `w_d = 1` for the four axial neighbours and `diag_weight` for the
//! four diagonal ones. With [`Stencil::Consistent`] the rate is
//! `dt / h² / (1 + 2 * diag_weight)`, which makes the linear limit
//! (`λ → ∞`, `g = 1`) a consistent discretisation of `u_t = Δu`.
//! [`Stencil::Unnormalized`] drops that factor and reproduces the classic
//! MATLAB-style scheme whose linear limit is `(1 + 2 * diag_weight) Δu`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::raster::{Raster, MAX_INTENSITY};
use crate::{Error, Result};

/// Upper bound on `dt / h²` for the explicit 8-neighbour scheme.
pub const MAX_RATE: f64 = 1.0 / 7.0;

pub const DEFAULT_LAMBDA: f64 = 11.0;
pub const DEFAULT_ITERATIONS: u32 = 12;
pub const DEFAULT_DIAG_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// The outermost ring of pixels keeps its initial values.
    #[default]
    Dirichlet,
    /// Zero flux: out-of-range neighbours take the value of the nearest edge pixel.
    Neumann,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stencil {
    #[default]
    Consistent,
    Unnormalized,
}

/// Perona-Malik diffusivity `(1 + s²/λ²)⁻¹`.
#[inline]
pub fn diffusivity(s2: f64, lambda: f64) -> f64 {
    1.0 / (1.0 + s2 / (lambda * lambda))
}

/// Serializable, unvalidated form of [`DiffusionParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub lambda: f64,
    pub dt: f64,
    pub n_iters: u32,
    pub boundary: Boundary,
    pub diag_weight: f64,
    /// Grid spacing `h`.
    pub spacing: f64,
    pub stencil: Stencil,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            dt: MAX_RATE,
            n_iters: DEFAULT_ITERATIONS,
            boundary: Boundary::Dirichlet,
            diag_weight: DEFAULT_DIAG_WEIGHT,
            spacing: 1.0,
            stencil: Stencil::Consistent,
        }
    }
}

/// Validated solver parameters. Construct through [`DiffusionConfig`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DiffusionConfig", into = "DiffusionConfig")]
pub struct DiffusionParams {
    config: DiffusionConfig,
}

impl TryFrom<DiffusionConfig> for DiffusionParams {
    type Error = Error;

    fn try_from(c: DiffusionConfig) -> Result<Self> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(c.lambda) {
            return Err(Error::Validation(format!(
                "lambda must be positive, got {}",
                c.lambda
            )));
        }
        if !positive(c.dt) {
            return Err(Error::Validation(format!(
                "dt must be positive, got {}",
                c.dt
            )));
        }
        if !positive(c.spacing) {
            return Err(Error::Validation(format!(
                "spacing must be positive, got {}",
                c.spacing
            )));
        }
        if !(c.diag_weight > 0.0 && c.diag_weight <= 1.0) {
            return Err(Error::Validation(format!(
                "diag_weight must lie in (0, 1], got {}",
                c.diag_weight
            )));
        }
        let rate = c.dt / (c.spacing * c.spacing);
        // Relative slack so that dt = h²/7 computed in floating point passes.
        if rate > MAX_RATE * (1.0 + 1e-12) {
            return Err(Error::Validation(format!(
                "unstable time step: dt/h^2 = {rate} exceeds 1/7"
            )));
        }
        Ok(Self { config: c })
    }
}

impl From<DiffusionParams> for DiffusionConfig {
    fn from(p: DiffusionParams) -> Self {
        p.config
    }
}

impl DiffusionParams {
    pub fn new(config: DiffusionConfig) -> Result<Self> {
        Self::try_from(config)
    }

    /// Defaults with `h = spacing` and the largest stable `dt = h²/7`.
    pub fn for_spacing(spacing: f64) -> Result<Self> {
        Self::new(DiffusionConfig {
            spacing,
            dt: spacing * spacing * MAX_RATE,
            ..Default::default()
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    pub fn lambda(&self) -> f64 {
        self.config.lambda
    }

    pub fn dt(&self) -> f64 {
        self.config.dt
    }

    pub fn n_iters(&self) -> u32 {
        self.config.n_iters
    }

    pub fn boundary(&self) -> Boundary {
        self.config.boundary
    }

    pub fn diag_weight(&self) -> f64 {
        self.config.diag_weight
    }

    pub fn spacing(&self) -> f64 {
        self.config.spacing
    }

    pub fn stencil(&self) -> Stencil {
        self.config.stencil
    }

    /// Total diffusion time `T = n_iters * dt`.
    pub fn total_time(&self) -> f64 {
        f64::from(self.config.n_iters) * self.config.dt
    }

    /// Predicted linear-limit smoothing width, in pixels.
    pub fn fwhm_pixels(&self) -> f64 {
        fwhm_of(self.total_time()) / self.config.spacing
    }

    fn rate(&self) -> f64 {
        let c = &self.config;
        let base = c.dt / (c.spacing * c.spacing);
        match c.stencil {
            Stencil::Consistent => base / (1.0 + 2.0 * c.diag_weight),
            Stencil::Unnormalized => base,
        }
    }
}

/// Full width at half maximum of the heat kernel after time `t`: `4 sqrt(t ln 2)`.
///
/// Negative `t` yields NaN.
pub fn fwhm_of(t: f64) -> f64 {
    4.0 * (t * std::f64::consts::LN_2).sqrt()
}

/// Iteration count that keeps the smoothing width when the grid spacing
/// changes from `h1` to `h2` (`h1² N1 = h2² N2`), rounded half-up.
pub fn iters_for_resolution(n1: u32, h1: f64, h2: f64) -> Result<u32> {
    if n1 == 0 || !(h1 > 0.0 && h2 > 0.0) {
        return Err(Error::Validation(
            "iteration count and spacings must be positive".into(),
        ));
    }
    let exact = f64::from(n1) * h1 * h1 / (h2 * h2);
    if exact < 0.5 {
        return Err(Error::Validation(format!(
            "equivalent iteration count {exact:.3} rounds to zero; reduce dt instead"
        )));
    }
    Ok((exact + 0.5).floor() as u32)
}

/// One explicit update. Reads `u` only and returns a fresh raster.
pub fn pm_step(u: &Raster, p: &DiffusionParams) -> Raster {
    let mut out = vec![0.0; u.len()];
    step_into(u.data(), &mut out, u.width(), u.height(), p);
    Raster::from_parts(u.width(), u.height(), u.spacing(), out)
}

/// `n_iters` applications of [`pm_step`], double-buffered.
pub fn pm_run(u0: &Raster, p: &DiffusionParams) -> Raster {
    run_steps(u0, p, p.n_iters(), |_, _| {})
}

/// Like [`pm_run`] but calls `observe(k, u_k)` for `k = 0..=n_iters`,
/// starting with the input.
pub fn pm_run_observed(
    u0: &Raster,
    p: &DiffusionParams,
    mut observe: impl FnMut(u32, &Raster),
) -> Raster {
    run_steps(u0, p, p.n_iters(), |k, r| observe(k, r))
}

fn run_steps(
    u0: &Raster,
    p: &DiffusionParams,
    n: u32,
    mut observe: impl FnMut(u32, &Raster),
) -> Raster {
    let (w, h) = (u0.width(), u0.height());
    let mut cur = u0.clone();
    observe(0, &cur);
    if n == 0 {
        return cur;
    }
    let mut next = vec![0.0; u0.len()];
    for k in 1..=n {
        step_into(cur.data(), &mut next, w, h, p);
        let prev = std::mem::replace(&mut cur, Raster::from_parts(w, h, u0.spacing(), next));
        next = prev.into_data();
        observe(k, &cur);
    }
    cur
}

#[inline(always)]
fn flux(center: f64, neighbour: f64, inv_l2: f64) -> f64 {
    let d = neighbour - center;
    d / (1.0 + d * d * inv_l2)
}

fn step_into(src: &[f64], dst: &mut [f64], width: usize, height: usize, p: &DiffusionParams) {
    if width == 0 || height == 0 {
        return;
    }
    let rate = p.rate();
    let inv_l2 = 1.0 / (p.lambda() * p.lambda());
    let wd = p.diag_weight();
    let boundary = p.boundary();

    dst.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        let on_edge_row = y == 0 || y + 1 == height;
        for (x, out) in row.iter_mut().enumerate() {
            let c = src[y * width + x];
            let on_edge = on_edge_row || x == 0 || x + 1 == width;
            if on_edge && boundary == Boundary::Dirichlet {
                *out = c;
                continue;
            }
            // Interior pixels never clamp, so both boundary modes share this path.
            let (xm, xp) = (x.saturating_sub(1), (x + 1).min(width - 1));
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(height - 1));
            let at = |xx: usize, yy: usize| src[yy * width + xx];

            let axial = flux(c, at(x, ym), inv_l2)
                + flux(c, at(x, yp), inv_l2)
                + flux(c, at(xm, y), inv_l2)
                + flux(c, at(xp, y), inv_l2);
            let diagonal = flux(c, at(xm, ym), inv_l2)
                + flux(c, at(xp, ym), inv_l2)
                + flux(c, at(xm, yp), inv_l2)
                + flux(c, at(xp, yp), inv_l2);
            let v = c + rate * (axial + wd * diagonal);
            *out = v.clamp(0.0, MAX_INTENSITY);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(f: impl FnOnce(&mut DiffusionConfig)) -> DiffusionParams {
        let mut c = DiffusionConfig::default();
        f(&mut c);
        DiffusionParams::new(c).unwrap()
    }

    fn spike() -> Raster {
        let mut data = vec![0.0; 9];
        data[4] = 70.0;
        Raster::new(3, 3, data).unwrap()
    }

    #[test]
    fn diffusivity_values() {
        assert_eq!(diffusivity(0.0, 11.0), 1.0);
        assert_eq!(diffusivity(121.0, 11.0), 0.5);
        assert_eq!(diffusivity(363.0, 11.0), 0.25);
        assert!(diffusivity(10.0, 11.0) > diffusivity(10.5, 11.0));
    }

    // Expected centres from a standalone scalar evaluation of the update rule:
    // g = 1/(1 + 4900/121), flux sum = 6 * g * (-70).
    #[test]
    fn spike_unnormalized_matches_hand_evaluation() {
        let p = params(|c| c.stencil = Stencil::Unnormalized);
        let out = pm_step(&spike(), &p);
        assert!((out.get(1, 1) - 68.554_072_893_845_84).abs() < 1e-9);
        for (i, v) in out.data().iter().enumerate() {
            if i != 4 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn spike_consistent_matches_hand_evaluation() {
        let out = pm_step(&spike(), &DiffusionParams::default());
        assert!((out.get(1, 1) - 69.277_036_446_922_92).abs() < 1e-9);
    }

    #[test]
    fn spike_linear_limit() {
        let raw = params(|c| {
            c.lambda = 1e9;
            c.stencil = Stencil::Unnormalized;
        });
        assert!((pm_step(&spike(), &raw).get(1, 1) - 10.0).abs() < 1e-9);
        let consistent = params(|c| c.lambda = 1e9);
        assert!((pm_step(&spike(), &consistent).get(1, 1) - 40.0).abs() < 1e-9);
    }

    #[test]
    fn constant_raster_is_fixed_point() {
        let r = Raster::filled(7, 5, 100.0).unwrap();
        for boundary in [Boundary::Dirichlet, Boundary::Neumann] {
            let p = params(|c| c.boundary = boundary);
            assert_eq!(pm_step(&r, &p), r);
            assert_eq!(pm_run(&r, &p), r);
        }
    }

    #[test]
    fn zero_iterations_is_identity() {
        let r = Raster::from_fn(6, 4, |x, y| ((x * 31 + y * 17) % 256) as f64).unwrap();
        let p = params(|c| c.n_iters = 0);
        assert_eq!(pm_run(&r, &p), r);
    }

    #[test]
    fn dirichlet_ring_frozen() {
        let r = Raster::from_fn(6, 5, |x, y| ((x * 53 + y * 97) % 256) as f64).unwrap();
        let out = pm_run(&r, &DiffusionParams::default());
        for y in 0..5 {
            for x in 0..6 {
                if x == 0 || y == 0 || x == 5 || y == 4 {
                    assert_eq!(out.get(x, y), r.get(x, y));
                }
            }
        }
        assert_ne!(out, r);
    }

    #[test]
    fn tiny_rasters() {
        let p = params(|c| c.boundary = Boundary::Neumann);
        let one = Raster::filled(1, 1, 3.0).unwrap();
        assert_eq!(pm_step(&one, &p), one);
        let row = Raster::new(3, 1, vec![0.0, 90.0, 0.0]).unwrap();
        let out = pm_step(&row, &p);
        let sum: f64 = out.data().iter().sum();
        assert!((sum - 90.0).abs() < 1e-12);
        assert!(out.get(1, 0) < 90.0);
    }

    #[test]
    fn parameter_validation() {
        let bad = |f: fn(&mut DiffusionConfig)| {
            let mut c = DiffusionConfig::default();
            f(&mut c);
            DiffusionParams::new(c).is_err()
        };
        assert!(bad(|c| c.lambda = 0.0));
        assert!(bad(|c| c.dt = 0.0));
        assert!(bad(|c| c.dt = 0.15));
        assert!(bad(|c| c.diag_weight = 0.0));
        assert!(bad(|c| c.diag_weight = 1.5));
        assert!(bad(|c| c.spacing = -1.0));
        assert!(!bad(|c| c.dt = 1.0 / 7.0));
        assert!(DiffusionParams::for_spacing(2.0).is_ok());
        assert!(DiffusionParams::new(DiffusionConfig {
            spacing: 2.0,
            dt: 4.0 / 7.0,
            ..Default::default()
        })
        .is_ok());
    }

    #[test]
    fn serde_round_trip_validates() {
        let p = DiffusionParams::default();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<DiffusionParams>(&json).unwrap(), p);
        let partial: DiffusionParams = serde_json::from_str(r#"{"n_iters": 3}"#).unwrap();
        assert_eq!(partial.n_iters(), 3);
        assert_eq!(partial.lambda(), DEFAULT_LAMBDA);
        assert!(serde_json::from_str::<DiffusionParams>(r#"{"dt": 1.0}"#).is_err());
    }

    #[test]
    fn fwhm_values() {
        assert!((fwhm_of(12.0 / 7.0) - 4.36).abs() < 0.01);
        assert_eq!(fwhm_of(0.0), 0.0);
        assert!((fwhm_of(1.0 / std::f64::consts::LN_2) - 4.0).abs() < 1e-12);
        assert!((DiffusionParams::default().fwhm_pixels() - 4.360_279_458).abs() < 1e-8);
    }

    #[test]
    fn resolution_rule() {
        assert_eq!(iters_for_resolution(12, 1.0, 2.0).unwrap(), 3);
        assert_eq!(iters_for_resolution(12, 1.0, 1.0).unwrap(), 12);
        assert_eq!(iters_for_resolution(3, 2.0, 1.0).unwrap(), 12);
        assert_eq!(iters_for_resolution(2, 1.0, 2.0).unwrap(), 1);
        assert!(iters_for_resolution(1, 1.0, 2.0).is_err());
        assert!(iters_for_resolution(0, 1.0, 1.0).is_err());
    }
}
