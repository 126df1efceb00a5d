//! Candidate extraction and filtering on the diffused raster.
//!
//! `detect` runs the diffusion, takes one point per minimal plateau, drops
//! candidates brighter than the intensity threshold and candidates whose dark
//! blob (connected component of `u <= threshold`) is smaller than the minimum
//! cell area.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::diffusion::{pm_run, DiffusionParams};
use crate::metrics;
use crate::raster::{Raster, MAX_INTENSITY};
use crate::{Error, Point, PointSet, Result};

pub const DEFAULT_THRESHOLD: f64 = 150.0;
pub const DEFAULT_MIN_BLOB_AREA: usize = 60;

const NEIGHBOURS_8: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];
const NEIGHBOURS_4: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &NEIGHBOURS_4,
            Connectivity::Eight => &NEIGHBOURS_8,
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(Error::Validation(format!(
                "connectivity must be 4 or 8, got {other}"
            ))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoThreshold {
    Otsu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub diffusion: DiffusionParams,
    pub intensity_threshold: f64,
    pub min_blob_area: usize,
    pub connectivity: Connectivity,
    /// When set, replaces `intensity_threshold` by a value computed on the
    /// diffused raster.
    pub auto_threshold: Option<AutoThreshold>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            diffusion: DiffusionParams::default(),
            intensity_threshold: DEFAULT_THRESHOLD,
            min_blob_area: DEFAULT_MIN_BLOB_AREA,
            connectivity: Connectivity::Eight,
            auto_threshold: None,
        }
    }
}

/// Validated detection parameters.
///
/// The threshold default of 150 is a placeholder; calibrate it on labeled or
/// synthetic data (see [`calibrate_threshold`]) before trusting counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DetectionConfig", into = "DetectionConfig")]
pub struct DetectionParams {
    config: DetectionConfig,
}

impl TryFrom<DetectionConfig> for DetectionParams {
    type Error = Error;

    fn try_from(c: DetectionConfig) -> Result<Self> {
        if !(0.0..=MAX_INTENSITY).contains(&c.intensity_threshold) {
            return Err(Error::Validation(format!(
                "intensity_threshold must lie in [0, 255], got {}",
                c.intensity_threshold
            )));
        }
        if c.min_blob_area == 0 {
            return Err(Error::Validation("min_blob_area must be at least 1".into()));
        }
        Ok(Self { config: c })
    }
}

impl From<DetectionParams> for DetectionConfig {
    fn from(p: DetectionParams) -> Self {
        p.config
    }
}

impl DetectionParams {
    pub fn new(config: DetectionConfig) -> Result<Self> {
        Self::try_from(config)
    }

    pub fn config(&self) -> &DetectionConfig {
        &self.config
    }

    pub fn diffusion(&self) -> &DiffusionParams {
        &self.config.diffusion
    }

    pub fn intensity_threshold(&self) -> f64 {
        self.config.intensity_threshold
    }

    pub fn min_blob_area(&self) -> usize {
        self.config.min_blob_area
    }

    pub fn connectivity(&self) -> Connectivity {
        self.config.connectivity
    }

    pub fn with_threshold(self, threshold: f64) -> Result<Self> {
        Self::new(DetectionConfig {
            intensity_threshold: threshold,
            auto_threshold: None,
            ..self.config
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejections {
    pub above_threshold: usize,
    pub small_blob: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub points: PointSet,
    pub rejected: Rejections,
    /// Threshold actually applied (differs from the configured one under
    /// automatic thresholding).
    pub threshold: f64,
}

impl Detection {
    pub fn raw_minima(&self) -> usize {
        self.points.len() + self.rejected.above_threshold + self.rejected.small_blob
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub diffusion: Duration,
    pub minima: Duration,
    pub filtering: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.diffusion + self.minima + self.filtering
    }
}

/// Connected components of the dark mask `u <= threshold`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    width: usize,
    /// 0 marks background; component `k` carries label `k`.
    labels: Vec<u32>,
    areas: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.areas.len()
    }

    pub fn label_at(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Area of component `label` (1-based).
    pub fn area(&self, label: u32) -> usize {
        self.areas[label as usize - 1]
    }

    pub fn areas(&self) -> &[usize] {
        &self.areas
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

#[inline]
fn neighbour(x: usize, y: usize, (dx, dy): (isize, isize), w: usize, h: usize) -> Option<usize> {
    let nx = x.checked_add_signed(dx)?;
    let ny = y.checked_add_signed(dy)?;
    (nx < w && ny < h).then_some(ny * w + nx)
}

/// One point per minimal plateau: a maximal 8-connected region of equal
/// intensity whose in-bounds exterior neighbours are all strictly brighter.
///
/// The representative is the plateau centroid rounded half-up; if that pixel
/// is not part of the plateau, the member closest to the centroid is used
/// (ties: smaller `y`, then smaller `x`). A constant raster is one plateau.
pub fn local_minima(u: &Raster) -> PointSet {
    let (w, h) = (u.width(), u.height());
    let data = u.data();
    let n = w * h;

    let mut has_lower = vec![false; n];
    for y in 0..h {
        for x in 0..w {
            let v = data[y * w + x];
            has_lower[y * w + x] = NEIGHBOURS_8
                .iter()
                .filter_map(|&d| neighbour(x, y, d, w, h))
                .any(|j| data[j] < v);
        }
    }

    let mut plateau_id = vec![0u32; n];
    let mut next_id = 0u32;
    let mut members: Vec<usize> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    let mut points = Vec::new();

    for start in 0..n {
        if plateau_id[start] != 0 {
            continue;
        }
        next_id += 1;
        let v = data[start];
        plateau_id[start] = next_id;
        members.clear();
        stack.push(start);
        let mut minimal = true;
        while let Some(i) = stack.pop() {
            members.push(i);
            minimal &= !has_lower[i];
            let (x, y) = (i % w, i / w);
            for &d in &NEIGHBOURS_8 {
                if let Some(j) = neighbour(x, y, d, w, h) {
                    if plateau_id[j] == 0 && data[j] == v {
                        plateau_id[j] = next_id;
                        stack.push(j);
                    }
                }
            }
        }
        if minimal {
            points.push(plateau_representative(&members, &plateau_id, next_id, w));
        }
    }
    PointSet::new(points, "minima").expect("plateaus are disjoint")
}

fn plateau_representative(members: &[usize], plateau_id: &[u32], id: u32, w: usize) -> Point {
    let count = members.len() as f64;
    let (sx, sy) = members.iter().fold((0.0, 0.0), |(sx, sy), &i| {
        (sx + (i % w) as f64, sy + (i / w) as f64)
    });
    let (cx, cy) = (sx / count, sy / count);
    let (rx, ry) = ((cx + 0.5).floor() as usize, (cy + 0.5).floor() as usize);
    let rounded = ry * w + rx;
    let chosen = if rx < w && rounded < plateau_id.len() && plateau_id[rounded] == id {
        rounded
    } else {
        *members
            .iter()
            .min_by(|&&a, &&b| {
                let da = ((a % w) as f64 - cx).powi(2) + ((a / w) as f64 - cy).powi(2);
                let db = ((b % w) as f64 - cx).powi(2) + ((b / w) as f64 - cy).powi(2);
                da.total_cmp(&db).then((a / w, a % w).cmp(&(b / w, b % w)))
            })
            .expect("plateau is nonempty")
    };
    Point::new((chosen % w) as u32, (chosen / w) as u32)
}

/// Number of pixels strictly darker than all of their in-bounds 8-neighbours.
pub fn count_strict_minima(u: &Raster) -> usize {
    let (w, h) = (u.width(), u.height());
    let data = u.data();
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| {
            let v = data[y * w + x];
            NEIGHBOURS_8
                .iter()
                .filter_map(|&d| neighbour(x, y, d, w, h))
                .all(|j| data[j] > v)
        })
        .count()
}

/// Labels the connected components of `{u <= threshold}`.
pub fn component_areas(u: &Raster, threshold: f64, connectivity: Connectivity) -> Components {
    let (w, h) = (u.width(), u.height());
    let data = u.data();
    let mut labels = vec![0u32; w * h];
    let mut areas = Vec::new();
    let mut queue = VecDeque::new();
    let offsets = connectivity.offsets();

    for start in 0..w * h {
        if labels[start] != 0 || data[start] > threshold {
            continue;
        }
        let label = areas.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut area = 0;
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (x, y) = (i % w, i / w);
            for &d in offsets {
                if let Some(j) = neighbour(x, y, d, w, h) {
                    if labels[j] == 0 && data[j] <= threshold {
                        labels[j] = label;
                        queue.push_back(j);
                    }
                }
            }
        }
        areas.push(area);
    }
    Components {
        width: w,
        labels,
        areas,
    }
}

/// Otsu's threshold over the 8-bit histogram of `u`. Pixels at or below the
/// returned level form the dark class.
pub fn otsu_threshold(u: &Raster) -> f64 {
    let mut hist = [0u64; 256];
    for &q in &u.to_u8() {
        hist[q as usize] += 1;
    }
    let total = u.len() as f64;
    let weighted_total: f64 = hist
        .iter()
        .enumerate()
        .map(|(v, &c)| v as f64 * c as f64)
        .sum();

    let (mut best_t, mut best_var) = (0usize, -1.0);
    let (mut w0, mut sum0) = (0.0, 0.0);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mean0 = sum0 / w0;
        let mean1 = (weighted_total - sum0) / w1;
        let var = w0 * w1 * (mean0 - mean1).powi(2);
        if var > best_var {
            best_var = var;
            best_t = t;
        }
    }
    if best_var < 0.0 {
        // Single-valued histogram: everything is one class.
        return u.max().max(0.0);
    }
    best_t as f64
}

/// Runs the full pipeline on `u0`.
pub fn detect(u0: &Raster, p: &DetectionParams) -> Detection {
    detect_timed(u0, p).0
}

pub fn detect_timed(u0: &Raster, p: &DetectionParams) -> (Detection, StageTimings) {
    let t0 = Instant::now();
    let u = pm_run(u0, p.diffusion());
    let t1 = Instant::now();
    let candidates = local_minima(&u);
    let t2 = Instant::now();
    let threshold = match p.config.auto_threshold {
        Some(AutoThreshold::Otsu) => otsu_threshold(&u),
        None => p.intensity_threshold(),
    };
    let detection = select(&u, &candidates, threshold, p);
    let t3 = Instant::now();
    let timings = StageTimings {
        diffusion: t1 - t0,
        minima: t2 - t1,
        filtering: t3 - t2,
    };
    (detection, timings)
}

/// Applies the intensity and blob-area filters to `candidates` on the
/// already diffused raster `u`.
fn select(u: &Raster, candidates: &PointSet, threshold: f64, p: &DetectionParams) -> Detection {
    let components = component_areas(u, threshold, p.connectivity());
    let mut rejected = Rejections::default();
    let mut kept = Vec::with_capacity(candidates.len());
    for c in candidates.iter() {
        let (x, y) = (c.x as usize, c.y as usize);
        if u.get(x, y) > threshold {
            rejected.above_threshold += 1;
            continue;
        }
        let label = components.label_at(x, y);
        if components.area(label) < p.min_blob_area() {
            rejected.small_blob += 1;
            continue;
        }
        kept.push(c);
    }
    Detection {
        points: PointSet::new(kept, "method").expect("subset of distinct candidates"),
        rejected,
        threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub threshold: f64,
    pub f1: f64,
}

/// Picks the intensity threshold maximising aggregate F1 against ground
/// truth over `samples`. Ties go to the lower threshold.
///
/// Diffusion and minima extraction run once per sample; only the filters are
/// re-evaluated per candidate threshold.
pub fn calibrate_threshold(
    samples: &[(Raster, PointSet)],
    base: &DetectionParams,
    candidates: impl IntoIterator<Item = f64>,
    radius: f64,
) -> Result<Calibration> {
    let prepared: Vec<(Raster, PointSet, &PointSet)> = samples
        .iter()
        .map(|(img, truth)| {
            let u = pm_run(img, base.diffusion());
            let minima = local_minima(&u);
            (u, minima, truth)
        })
        .collect();

    let mut best: Option<Calibration> = None;
    for threshold in candidates {
        let params = base.with_threshold(threshold)?;
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (u, minima, truth) in &prepared {
            let d = select(u, minima, threshold, &params);
            let s = metrics::detection_stats(truth, &d.points, radius);
            tp += s.tp;
            fp += s.fp;
            fn_ += s.fn_;
        }
        let f1 = metrics::DetectionStats::from_counts(tp, fp, fn_).f1;
        if best.is_none_or(|b| f1 > b.f1) {
            best = Some(Calibration { threshold, f1 });
        }
    }
    best.ok_or_else(|| Error::Validation("no candidate thresholds given".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DiffusionConfig;

    fn pts(ps: &PointSet) -> Vec<(u32, u32)> {
        ps.iter().map(|p| (p.x, p.y)).collect()
    }

    fn no_diffusion() -> DiffusionParams {
        DiffusionParams::new(DiffusionConfig {
            n_iters: 0,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn unique_strict_minimum() {
        let r = Raster::from_fn(3, 3, |x, y| if (x, y) == (1, 1) { 1.0 } else { 5.0 }).unwrap();
        assert_eq!(pts(&local_minima(&r)), vec![(1, 1)]);
        assert_eq!(count_strict_minima(&r), 1);
    }

    #[test]
    fn constant_raster_single_plateau() {
        let r = Raster::filled(5, 3, 42.0).unwrap();
        assert_eq!(pts(&local_minima(&r)), vec![(2, 1)]);
        assert_eq!(count_strict_minima(&r), 0);
    }

    #[test]
    fn plateau_centroid_rounds_half_up() {
        let r = Raster::new(4, 1, vec![3.0, 1.0, 1.0, 3.0]).unwrap();
        assert_eq!(pts(&local_minima(&r)), vec![(2, 0)]);
    }

    #[test]
    fn non_minimal_plateau_ignored() {
        // Plateau of 2s touches a 1.
        let r = Raster::new(5, 1, vec![3.0, 2.0, 2.0, 1.0, 4.0]).unwrap();
        assert_eq!(pts(&local_minima(&r)), vec![(3, 0)]);
    }

    #[test]
    fn ring_plateau_uses_nearest_member() {
        // A ring of 0s around a brighter centre; centroid (2, 2) is not on the ring.
        let r = Raster::from_fn(5, 5, |x, y| {
            let ring = (1..=3).contains(&x) && (1..=3).contains(&y) && (x, y) != (2, 2);
            if ring {
                0.0
            } else if (x, y) == (2, 2) {
                9.0
            } else {
                5.0
            }
        })
        .unwrap();
        // Members at distance 1 from the centroid: (2,1), (1,2), (3,2), (2,3).
        assert_eq!(pts(&local_minima(&r)), vec![(2, 1)]);
    }

    #[test]
    fn diagonal_pair_connectivity() {
        let r = Raster::from_fn(3, 3, |x, y| {
            if (x, y) == (0, 0) || (x, y) == (1, 1) {
                10.0
            } else {
                200.0
            }
        })
        .unwrap();
        let eight = component_areas(&r, 100.0, Connectivity::Eight);
        assert_eq!(eight.areas(), &[2]);
        let four = component_areas(&r, 100.0, Connectivity::Four);
        assert_eq!(four.areas(), &[1, 1]);
        assert_eq!(four.label_at(1, 1), 2);
        assert_eq!(four.label_at(2, 2), 0);
    }

    #[test]
    fn empty_mask_has_no_components() {
        let r = Raster::filled(4, 4, 200.0).unwrap();
        assert_eq!(component_areas(&r, 150.0, Connectivity::Eight).count(), 0);
    }

    #[test]
    fn blank_raster_rejects_everything_above_threshold() {
        let r = Raster::filled(32, 32, 255.0).unwrap();
        let d = detect(&r, &DetectionParams::default());
        assert!(d.points.is_empty());
        assert_eq!(d.rejected.above_threshold, d.raw_minima());
        assert!(d.raw_minima() >= 1);
    }

    fn disk(radius: f64, value: f64) -> Raster {
        Raster::from_fn(40, 40, |x, y| {
            let r2 = (x as f64 - 20.0).powi(2) + (y as f64 - 20.0).powi(2);
            if r2 <= radius * radius {
                value + r2.sqrt()
            } else {
                255.0
            }
        })
        .unwrap()
    }

    #[test]
    fn blob_area_filter() {
        let p = DetectionParams::new(DetectionConfig {
            diffusion: no_diffusion(),
            ..Default::default()
        })
        .unwrap();
        let big = detect(&disk(8.0, 40.0), &p);
        assert_eq!(pts(&big.points), vec![(20, 20)]);
        let small = detect(&disk(2.0, 40.0), &p);
        assert!(small.points.is_empty());
        assert_eq!(small.rejected.small_blob, 1);
    }

    #[test]
    fn otsu_splits_bimodal() {
        let r = Raster::from_fn(10, 10, |x, _| if x < 3 { 40.0 } else { 220.0 }).unwrap();
        let t = otsu_threshold(&r);
        assert!((40.0..220.0).contains(&t), "{t}");
        assert_eq!(otsu_threshold(&Raster::filled(3, 3, 7.0).unwrap()), 7.0);
    }

    #[test]
    fn auto_threshold_is_reported() {
        let p = DetectionParams::new(DetectionConfig {
            diffusion: no_diffusion(),
            auto_threshold: Some(AutoThreshold::Otsu),
            ..Default::default()
        })
        .unwrap();
        let d = detect(&disk(8.0, 40.0), &p);
        assert_ne!(d.threshold, DEFAULT_THRESHOLD);
        assert_eq!(d.points.len(), 1);
    }

    #[test]
    fn params_validation() {
        let bad = |c: DetectionConfig| DetectionParams::new(c).is_err();
        assert!(bad(DetectionConfig {
            intensity_threshold: 256.0,
            ..Default::default()
        }));
        assert!(bad(DetectionConfig {
            min_blob_area: 0,
            ..Default::default()
        }));
        assert!(Connectivity::try_from(6).is_err());
    }
}
