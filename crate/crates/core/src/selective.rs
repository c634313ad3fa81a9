//! Selective classification: threshold rejection, risk–coverage curves,
//! AURC and operating-point readings.
//!
//! A prediction is accepted when its uncertainty is at most the threshold.
//! Predictions that share an uncertainty value are accepted or rejected
//! together, so every point on a curve corresponds to a realisable threshold.
//! Sorting is canonical on `(uncertainty, sample_id)`, which makes every
//! result independent of input order.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Auxiliary logit statistics carried alongside a score for the diagnostics
/// in [`crate::analysis`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxStats {
    pub v_max: f64,
    pub pi_max: f64,
    /// Max of the normalised logit vector.
    pub v_prime_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub uncertainty: f64,
    pub correct: bool,
    pub sample_id: u64,
    pub source_tag: Option<String>,
    pub aux: Option<AuxStats>,
}

impl ScoredPrediction {
    pub fn new(sample_id: u64, uncertainty: f64, correct: bool) -> Self {
        Self {
            uncertainty,
            correct,
            sample_id,
            source_tag: None,
            aux: None,
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.source_tag = Some(tag.into());
        self
    }

    pub fn with_aux(mut self, aux: AuxStats) -> Self {
        self.aux = Some(aux);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcPoint {
    pub coverage: f64,
    pub risk: f64,
    pub threshold: f64,
    pub accepted: usize,
    pub errors: usize,
}

/// Risk–coverage curve with one point per distinct uncertainty value.
#[derive(Debug, Clone, PartialEq)]
pub struct RcCurve {
    points: Vec<RcPoint>,
    n_total: usize,
}

impl RcCurve {
    pub fn points(&self) -> &[RcPoint] {
        &self.points
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    /// Risk at full coverage, i.e. the plain error rate.
    pub fn full_coverage_risk(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.risk)
    }
}

/// The rejection rule: accept iff `u <= tau`.
pub fn accept(u: f64, tau: f64) -> bool {
    u <= tau
}

fn canonical_cmp(a: &ScoredPrediction, b: &ScoredPrediction) -> Ordering {
    a.uncertainty
        .total_cmp(&b.uncertainty)
        .then(a.sample_id.cmp(&b.sample_id))
}

fn check_finite(preds: &[ScoredPrediction]) -> Result<()> {
    if let Some(p) = preds.iter().find(|p| !p.uncertainty.is_finite()) {
        return Err(Error::invalid(format!(
            "sample {} has non-finite uncertainty {}",
            p.sample_id, p.uncertainty
        )));
    }
    Ok(())
}

/// Sorted references in canonical order.
fn sorted(preds: &[ScoredPrediction]) -> Vec<&ScoredPrediction> {
    let mut order: Vec<&ScoredPrediction> = preds.iter().collect();
    order.sort_by(|a, b| canonical_cmp(a, b));
    order
}

pub fn rc_curve(preds: &[ScoredPrediction]) -> Result<RcCurve> {
    if preds.is_empty() {
        return Err(Error::invalid("risk-coverage curve of an empty set"));
    }
    check_finite(preds)?;
    let order = sorted(preds);
    let n = order.len();
    let mut points = Vec::new();
    let mut errors = 0usize;
    for (i, p) in order.iter().enumerate() {
        if !p.correct {
            errors += 1;
        }
        let last_of_block = i + 1 == n || order[i + 1].uncertainty != p.uncertainty;
        if last_of_block {
            let accepted = i + 1;
            points.push(RcPoint {
                coverage: accepted as f64 / n as f64,
                risk: errors as f64 / accepted as f64,
                threshold: p.uncertainty,
                accepted,
                errors,
            });
        }
    }
    Ok(RcCurve { points, n_total: n })
}

/// Mean selective risk over the per-sample coverage levels `n/N`,
/// `n = 1..N`. Every sample of a tie block takes the block's risk.
pub fn aurc(curve: &RcCurve) -> f64 {
    let mut prev = 0usize;
    let mut total = 0.0;
    for p in &curve.points {
        total += (p.accepted - prev) as f64 * p.risk;
        prev = p.accepted;
    }
    total / curve.n_total as f64
}

/// Largest coverage whose risk does not exceed `target_risk`; 0 when no
/// point qualifies.
pub fn coverage_at_risk(curve: &RcCurve, target_risk: f64) -> f64 {
    best_point_at_risk(curve, target_risk).map_or(0.0, |p| p.coverage)
}

fn best_point_at_risk(curve: &RcCurve, target_risk: f64) -> Option<&RcPoint> {
    curve
        .points
        .iter()
        .filter(|p| p.risk <= target_risk)
        .max_by(|a, b| a.coverage.total_cmp(&b.coverage))
}

/// Risk at the smallest curve coverage that reaches `target_cov`.
pub fn risk_at_coverage(curve: &RcCurve, target_cov: f64) -> Result<f64> {
    if !(target_cov > 0.0 && target_cov <= 1.0) {
        return Err(Error::invalid(format!(
            "target coverage {target_cov} outside (0, 1]"
        )));
    }
    // Exact fractions n/N can land a hair above the requested coverage.
    let needed = target_cov - 1e-12;
    let point = curve
        .points
        .iter()
        .find(|p| p.coverage >= needed)
        .expect("final point has coverage 1");
    Ok(point.risk)
}

/// Threshold that realises [`coverage_at_risk`] on a validation set, or
/// `-inf` (reject everything) when the target risk is unattainable.
pub fn select_threshold(val_preds: &[ScoredPrediction], target_risk: f64) -> Result<f64> {
    let curve = rc_curve(val_preds)?;
    Ok(best_point_at_risk(&curve, target_risk).map_or(f64::NEG_INFINITY, |p| p.threshold))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceStats {
    pub source: String,
    pub count: usize,
    pub errors: usize,
    pub error_rate: f64,
}

/// Per-source acceptance statistics on a pooled in-distribution and shifted
/// evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftMixReport {
    pub coverage: f64,
    pub accepted: usize,
    pub in_distribution: SourceStats,
    pub shifted: SourceStats,
}

pub const SOURCE_ID: &str = "id";
pub const SOURCE_SHIFT: &str = "shift";

/// Pools both sets and accepts the most certain `coverage` fraction, taking
/// whole tie blocks only (a block that would overshoot the budget is
/// rejected).
pub fn shift_mix_report(
    preds_id: &[ScoredPrediction],
    preds_shift: &[ScoredPrediction],
    coverage: f64,
) -> Result<ShiftMixReport> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::invalid(format!(
            "coverage {coverage} outside (0, 1]"
        )));
    }
    if preds_id.is_empty() || preds_shift.is_empty() {
        return Err(Error::invalid(
            "shift-mix report needs both sources non-empty",
        ));
    }
    check_finite(preds_id)?;
    check_finite(preds_shift)?;

    // Sample ids may collide across sources, so order on (U, source, id).
    let mut pooled: Vec<(&ScoredPrediction, bool)> = preds_id
        .iter()
        .map(|p| (p, false))
        .chain(preds_shift.iter().map(|p| (p, true)))
        .collect();
    pooled.sort_by(|a, b| {
        a.0.uncertainty
            .total_cmp(&b.0.uncertainty)
            .then(a.1.cmp(&b.1))
            .then(a.0.sample_id.cmp(&b.0.sample_id))
    });
    let n = pooled.len();
    let budget = ((coverage * n as f64) + 1e-9).floor() as usize;

    let mut accepted = 0usize;
    let mut i = 0usize;
    while i < n {
        let mut j = i + 1;
        while j < n && pooled[j].0.uncertainty == pooled[i].0.uncertainty {
            j += 1;
        }
        if j > budget {
            break;
        }
        accepted = j;
        i = j;
    }

    let mut stats = [(0usize, 0usize); 2];
    for (p, shifted) in &pooled[..accepted] {
        let s = &mut stats[usize::from(*shifted)];
        s.0 += 1;
        if !p.correct {
            s.1 += 1;
        }
    }
    let make = |source: &str, (count, errors): (usize, usize)| SourceStats {
        source: source.to_string(),
        count,
        errors,
        error_rate: if count == 0 {
            0.0
        } else {
            errors as f64 / count as f64
        },
    };
    Ok(ShiftMixReport {
        coverage,
        accepted,
        in_distribution: make(SOURCE_ID, stats[0]),
        shifted: make(SOURCE_SHIFT, stats[1]),
    })
}
