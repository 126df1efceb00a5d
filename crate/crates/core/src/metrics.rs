//! Point-set agreement: greedy spatial matching, Jaccard-style pairwise
//! agreement between raters, the inter-rater / rater-method ratio, the
//! multi-rater overlap breakdown and detection statistics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Point, PointSet, Result};

/// Default matching radius in pixels at 0.452 µm/px.
pub const DEFAULT_RADIUS: f64 = 11.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

/// One-to-one correspondence between two point sets under a distance cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<MatchPair>,
    pub radius: f64,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

impl Matching {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Greedy matching in ascending distance over all pairs within `radius`.
///
/// Equal distances are ordered by the row-major smaller endpoint, then the
/// larger one, then the endpoint from `a`. The key does not depend on input
/// order, and swapping `a` and `b` only reorders pairs that share no point,
/// so the matched count is symmetric.
pub fn match_points(a: &PointSet, b: &PointSet, radius: f64) -> Matching {
    let candidates = candidate_pairs(a.points(), b.points(), radius);
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, ia, ib) in candidates {
        if used_a[ia] || used_b[ib] {
            continue;
        }
        used_a[ia] = true;
        used_b[ib] = true;
        let d2 = a.points()[ia].dist2(b.points()[ib]);
        pairs.push(MatchPair {
            a: ia,
            b: ib,
            distance: (d2 as f64).sqrt(),
        });
    }
    let unmatched = |used: &[bool]| {
        used.iter()
            .enumerate()
            .filter(|(_, u)| !**u)
            .map(|(i, _)| i)
            .collect()
    };
    Matching {
        pairs,
        radius,
        unmatched_a: unmatched(&used_a),
        unmatched_b: unmatched(&used_b),
    }
}

type SortKey = (u64, (u32, u32), (u32, u32), (u32, u32));

/// All `(a, b)` index pairs within `radius`, sorted by the greedy key.
fn candidate_pairs(a: &[Point], b: &[Point], radius: f64) -> Vec<(SortKey, usize, usize)> {
    if radius.is_nan() || radius < 0.0 || a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let r2 = radius * radius;
    let cell = radius.ceil().max(1.0) as u64;
    let cell_of = |p: Point| (u64::from(p.x) / cell, u64::from(p.y) / cell);

    let mut grid: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
    for (ib, &p) in b.iter().enumerate() {
        grid.entry(cell_of(p)).or_default().push(ib);
    }

    let mut out = Vec::new();
    for (ia, &pa) in a.iter().enumerate() {
        let (cx, cy) = cell_of(pa);
        for gy in cy.saturating_sub(1)..=cy + 1 {
            for gx in cx.saturating_sub(1)..=cx + 1 {
                let Some(bucket) = grid.get(&(gx, gy)) else {
                    continue;
                };
                for &ib in bucket {
                    let pb = b[ib];
                    let d2 = pa.dist2(pb);
                    if d2 as f64 <= r2 {
                        let (ka, kb) = (pa.row_major(), pb.row_major());
                        out.push(((d2, ka.min(kb), ka.max(kb), ka), ia, ib));
                    }
                }
            }
        }
    }
    out.sort_unstable_by_key(|&(key, _, _)| key);
    out
}

/// `|a ∩ b| / |a ∪ b|` with the intersection realised by [`match_points`].
/// Two empty sets agree perfectly.
pub fn pairwise_agreement(a: &PointSet, b: &PointSet, radius: f64) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let m = match_points(a, b, radius).len();
    m as f64 / (a.len() + b.len() - m) as f64
}

fn require_experts(experts: &[PointSet]) -> Result<()> {
    if experts.len() < 2 {
        return Err(Error::Validation(format!(
            "at least two rater sets are required, got {}",
            experts.len()
        )));
    }
    Ok(())
}

/// Mean agreement over unordered expert pairs divided by the mean agreement
/// of each expert with the method. Values near 1 mean the method agrees with
/// the experts as well as they agree among themselves.
pub fn delta_ratio(experts: &[PointSet], method: &PointSet, radius: f64) -> Result<f64> {
    require_experts(experts)?;
    let mut inter = Vec::new();
    for (i, a) in experts.iter().enumerate() {
        for b in &experts[i + 1..] {
            inter.push(pairwise_agreement(a, b, radius));
        }
    }
    let with_method: Vec<f64> = experts
        .iter()
        .map(|e| pairwise_agreement(e, method, radius))
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let denominator = mean(&with_method);
    if denominator == 0.0 {
        return Err(Error::Degenerate(
            "method agrees with no expert; ratio undefined".into(),
        ));
    }
    Ok(mean(&inter) / denominator)
}

/// How many of the pooled annotations were marked by exactly `k` raters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapBreakdown {
    /// `counts[k - 1]` clusters were marked by exactly `k` raters.
    pub counts: Vec<usize>,
    /// `counts` divided by the number of clusters; all zero when no rater
    /// marked anything.
    pub fractions: Vec<f64>,
    pub clusters: usize,
}

/// Pools annotations from all raters into clusters. Raters are folded in
/// order: each one is matched against the current cluster representatives
/// (the first point that founded each cluster) and unmatched points open new
/// clusters.
pub fn overlap_breakdown(experts: &[PointSet], radius: f64) -> Result<OverlapBreakdown> {
    require_experts(experts)?;
    let mut representatives = PointSet::empty("consensus");
    let mut raters_per_cluster: Vec<usize> = Vec::new();
    for rater in experts {
        let m = match_points(&representatives, rater, radius);
        for pair in &m.pairs {
            raters_per_cluster[pair.a] += 1;
        }
        let mut reps = representatives.points().to_vec();
        for &ib in &m.unmatched_b {
            reps.push(rater.points()[ib]);
            raters_per_cluster.push(1);
        }
        // Distinct coordinates: new points were unmatched at distance 0.
        representatives = PointSet::new(reps, "consensus").map_err(|_| {
            Error::Validation("radius must be positive to pool coincident annotations".into())
        })?;
    }
    let mut counts = vec![0; experts.len()];
    for &k in &raters_per_cluster {
        counts[k - 1] += 1;
    }
    let clusters = raters_per_cluster.len();
    let fractions = counts
        .iter()
        .map(|&c| {
            if clusters == 0 {
                0.0
            } else {
                c as f64 / clusters as f64
            }
        })
        .collect();
    Ok(OverlapBreakdown {
        counts,
        fractions,
        clusters,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub sensitivity: f64,
    pub precision: f64,
    pub f1: f64,
    /// `tp / (tp + fp + fn)`; there are no true negatives to count.
    pub agreement_accuracy: f64,
}

impl DetectionStats {
    /// Zero denominators resolve to 1 when there was nothing to get wrong
    /// and to 0 otherwise.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize, vacuous: f64| {
            if den == 0 {
                vacuous
            } else {
                num as f64 / den as f64
            }
        };
        let sensitivity = ratio(tp, tp + fn_, 1.0);
        let precision = ratio(tp, tp + fp, if fn_ == 0 { 1.0 } else { 0.0 });
        let f1 = if precision + sensitivity == 0.0 {
            0.0
        } else {
            2.0 * precision * sensitivity / (precision + sensitivity)
        };
        Self {
            tp,
            fp,
            fn_,
            sensitivity,
            precision,
            f1,
            agreement_accuracy: ratio(tp, tp + fp + fn_, 1.0),
        }
    }
}

pub fn detection_stats(truth: &PointSet, detected: &PointSet, radius: f64) -> DetectionStats {
    let tp = match_points(truth, detected, radius).len();
    DetectionStats::from_counts(tp, detected.len() - tp, truth.len() - tp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAgreement {
    pub a: String,
    pub b: String,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub pairwise: Vec<PairAgreement>,
    pub overlap_breakdown: OverlapBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_ratio: Option<f64>,
}

/// Pairwise agreement for every unordered rater pair, the overlap breakdown,
/// and the expert/method ratio when a method set is supplied.
pub fn agreement_report(
    experts: &[PointSet],
    method: Option<&PointSet>,
    radius: f64,
) -> Result<AgreementReport> {
    require_experts(experts)?;
    let mut pairwise = Vec::new();
    for (i, a) in experts.iter().enumerate() {
        for b in &experts[i + 1..] {
            pairwise.push(PairAgreement {
                a: a.label().to_owned(),
                b: b.label().to_owned(),
                delta: pairwise_agreement(a, b, radius),
            });
        }
    }
    let delta_ratio = method
        .map(|m| delta_ratio(experts, m, radius))
        .transpose()?;
    Ok(AgreementReport {
        pairwise,
        overlap_breakdown: overlap_breakdown(experts, radius)?,
        delta_ratio,
    })
}
