//! Post-hoc logit normalisation.
//!
//! The logits are (optionally) mean-centred, divided by their p-norm, and the
//! negated maximum of the result is used as the uncertainty score. Unlike the
//! softmax, the normalised maximum of positive logits falls when a constant
//! is added to every logit, which lets it penalise inflated max logits.

use crate::data::LogitRecord;
use crate::error::{Error, Result};
use crate::scores::{max_of, LogitVector};
use crate::selective::{aurc, rc_curve, ScoredPrediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShiftMode {
    /// Subtract the logit mean before normalising.
    #[default]
    MeanCentralise,
    None,
}

impl ShiftMode {
    pub fn name(self) -> &'static str {
        match self {
            ShiftMode::MeanCentralise => "mean",
            ShiftMode::None => "none",
        }
    }
}

impl std::str::FromStr for ShiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" | "mean-centralise" => Ok(ShiftMode::MeanCentralise),
            "none" => Ok(ShiftMode::None),
            other => Err(Error::invalid(format!(
                "unknown shift mode '{other}' (expected mean|none)"
            ))),
        }
    }
}

pub const DEFAULT_P_GRID: [f64; 8] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];

#[derive(Debug, Clone, PartialEq)]
pub struct NormConfig {
    p: f64,
    shift_mode: ShiftMode,
    p_grid: Vec<f64>,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            p: 2.0,
            shift_mode: ShiftMode::MeanCentralise,
            p_grid: DEFAULT_P_GRID.to_vec(),
        }
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0) || p.is_nan() {
        return Err(Error::InvalidConfig(format!(
            "norm order p must be >= 1, got {p}"
        )));
    }
    Ok(())
}

impl NormConfig {
    pub fn new(p: f64, shift_mode: ShiftMode, p_grid: Vec<f64>) -> Result<Self> {
        check_p(p)?;
        if p_grid.is_empty() {
            return Err(Error::InvalidConfig("empty p grid".into()));
        }
        for q in &p_grid {
            check_p(*q)?;
        }
        if p_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "p grid must be strictly ascending: {p_grid:?}"
            )));
        }
        Ok(Self {
            p,
            shift_mode,
            p_grid,
        })
    }

    pub fn with_p(&self, p: f64) -> Result<Self> {
        check_p(p)?;
        Ok(Self { p, ..self.clone() })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn shift_mode(&self) -> ShiftMode {
        self.shift_mode
    }

    pub fn p_grid(&self) -> &[f64] {
        &self.p_grid
    }
}

/// `‖x‖_p`, `p` in `[1, inf]`, scaled by `max|x|` to avoid overflow.
pub fn p_norm(x: &[f64], p: f64) -> f64 {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 {
        return 0.0;
    }
    if p.is_infinite() {
        return m;
    }
    let s: f64 = x.iter().map(|v| (v.abs() / m).powf(p)).sum();
    m * s.powf(1.0 / p)
}

fn shifted(v: &[f64], mode: ShiftMode) -> Vec<f64> {
    match mode {
        ShiftMode::MeanCentralise => {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| x - mean).collect()
        }
        ShiftMode::None => v.to_vec(),
    }
}

/// `(v + s) / ‖v + s‖_p`.
pub fn normalise_logits(v: &LogitVector, cfg: &NormConfig) -> Result<LogitVector> {
    let x = shifted(v.as_slice(), cfg.shift_mode);
    let norm = p_norm(&x, cfg.p);
    if norm == 0.0 {
        return Err(Error::Degenerate(
            "logit vector is zero after shifting; normalisation undefined".into(),
        ));
    }
    LogitVector::new(x.into_iter().map(|e| e / norm).collect())
}

/// `U = -max_k v'_k`.
pub fn score_maxlogit_norm(v: &LogitVector, cfg: &NormConfig) -> Result<f64> {
    Ok(-normalise_logits(v, cfg)?.max())
}

/// Evaluates the strict inequality `‖v‖∞/‖v‖p > ‖v+η1‖∞/‖v+η1‖p` for a
/// strictly positive `v` with at least two distinct entries, `η > 0` and
/// `p >= 1`. The hypotheses are enforced as preconditions.
pub fn check_result1(v: &[f64], eta: f64, p: f64) -> Result<bool> {
    let (lhs, rhs) = result1_ratios(v, eta, p)?;
    Ok(lhs > rhs)
}

/// The two sides of the uniform-shift inequality.
pub fn result1_ratios(v: &[f64], eta: f64, p: f64) -> Result<(f64, f64)> {
    if v.len() < 2 {
        return Err(Error::invalid("need at least two entries"));
    }
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::invalid(
            "entries must be finite and strictly positive",
        ));
    }
    if v.iter().all(|x| *x == v[0]) {
        return Err(Error::invalid(
            "entries must contain at least two distinct values",
        ));
    }
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::invalid(format!(
            "eta must be finite and > 0, got {eta}"
        )));
    }
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("p must be >= 1, got {p}")));
    }
    let w: Vec<f64> = v.iter().map(|x| x + eta).collect();
    Ok((max_of(v) / p_norm(v, p), max_of(&w) / p_norm(&w, p)))
}

/// Score records with the normalised max logit; correctness is
/// `argmax == label`.
pub fn score_records(records: &[LogitRecord], cfg: &NormConfig) -> Result<Vec<ScoredPrediction>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let u = score_maxlogit_norm(&r.logits, cfg)?;
            Ok(ScoredPrediction::new(i as u64, u, r.is_correct()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PSearch {
    pub p_best: f64,
    pub aurc_best: f64,
    /// `(p, AURC)` for every grid value, in grid order.
    pub per_p: Vec<(f64, f64)>,
}

/// Grid search for the norm order minimising validation AURC. Ties go to
/// the smaller `p`.
pub fn search_p(val: &[LogitRecord], cfg: &NormConfig) -> Result<PSearch> {
    if val.is_empty() {
        return Err(Error::invalid("p search needs a non-empty validation set"));
    }
    let mut per_p = Vec::with_capacity(cfg.p_grid.len());
    for &p in &cfg.p_grid {
        let preds = score_records(val, &cfg.with_p(p)?)?;
        per_p.push((p, aurc(&rc_curve(&preds)?)));
    }
    let (p_best, aurc_best) =
        per_p
            .iter()
            .copied()
            .fold((f64::NAN, f64::INFINITY), |best, (p, a)| {
                if a < best.1 {
                    (p, a)
                } else {
                    best
                }
            });
    Ok(PSearch {
        p_best,
        aurc_best,
        per_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    fn cfg(p: f64, mode: ShiftMode) -> NormConfig {
        NormConfig::new(p, mode, DEFAULT_P_GRID.to_vec()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(NormConfig::new(0.5, ShiftMode::None, vec![1.0]).is_err());
        assert!(NormConfig::new(2.0, ShiftMode::None, vec![]).is_err());
        assert!(NormConfig::new(2.0, ShiftMode::None, vec![2.0, 1.0]).is_err());
        assert_eq!(NormConfig::default().p_grid(), &DEFAULT_P_GRID);
        assert_eq!(
            NormConfig::default().shift_mode(),
            ShiftMode::MeanCentralise
        );
    }

    #[test]
    fn normalise_examples() {
        let s = 0.5f64.sqrt();
        let out = normalise_logits(&lv(&[3.0, 1.0]), &cfg(2.0, ShiftMode::MeanCentralise)).unwrap();
        assert!((out.as_slice()[0] - s).abs() < 1e-15);
        assert!((out.as_slice()[1] + s).abs() < 1e-15);

        let unit = lv(&[s, -s]);
        let again = normalise_logits(&unit, &cfg(2.0, ShiftMode::MeanCentralise)).unwrap();
        for (a, b) in again.as_slice().iter().zip(unit.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }

        let out = normalise_logits(&lv(&[2.0, 1.0]), &cfg(1.0, ShiftMode::None)).unwrap();
        assert!((out.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn maxlogit_examples() {
        let u =
            score_maxlogit_norm(&lv(&[3.0, 1.0]), &cfg(2.0, ShiftMode::MeanCentralise)).unwrap();
        assert!((u + 0.5f64.sqrt()).abs() < 1e-15);
        let u = score_maxlogit_norm(&lv(&[2.0, 1.0]), &cfg(1.0, ShiftMode::None)).unwrap();
        assert!((u + 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            score_maxlogit_norm(&lv(&[4.0, 4.0, 4.0]), &cfg(2.0, ShiftMode::MeanCentralise)),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            score_maxlogit_norm(&lv(&[0.0, 0.0]), &cfg(2.0, ShiftMode::None)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn result1_examples() {
        assert!(check_result1(&[2.0, 1.0], 1.0, 1.0).unwrap());
        let (l, r) = result1_ratios(&[2.0, 1.0], 1.0, 1.0).unwrap();
        assert!((l - 2.0 / 3.0).abs() < 1e-15 && (r - 3.0 / 5.0).abs() < 1e-15);

        assert!(check_result1(&[2.0, 1.0], 100.0, 2.0).unwrap());
        let (l, r) = result1_ratios(&[2.0, 1.0], 100.0, 2.0).unwrap();
        assert!((l - 2.0 / 5f64.sqrt()).abs() < 1e-15);
        assert!(r > 0.5f64.sqrt() && r < l);

        assert!(check_result1(&[1.0, 1.0], 1.0, 2.0).is_err());
        assert!(check_result1(&[1.0, -1.0], 1.0, 2.0).is_err());
        assert!(check_result1(&[1.0, 2.0], 0.0, 2.0).is_err());
        assert!(check_result1(&[1.0, 2.0], 1.0, 0.9).is_err());
    }

    #[test]
    fn p_norm_large_values_do_not_overflow() {
        let n = p_norm(&[1e200, 1e200], 8.0);
        assert!((n / 1e200 - 2f64.powf(1.0 / 8.0)).abs() < 1e-14);
        assert_eq!(p_norm(&[3.0, -4.0], f64::INFINITY), 4.0);
        assert!((p_norm(&[3.0, -4.0], 2.0) - 5.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn unit_norm_after_normalising(
            v in proptest::collection::vec(-20.0f64..20.0, 2..10),
            p in 1.0f64..8.0,
        ) {
            let v = lv(&v);
            if let Ok(out) = normalise_logits(&v, &cfg(p, ShiftMode::MeanCentralise)) {
                prop_assert!((p_norm(out.as_slice(), p) - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn centralisation_removes_uniform_shift(
            v in proptest::collection::vec(-20.0f64..20.0, 2..10),
            eta in -50.0f64..50.0,
            p in 1.0f64..8.0,
        ) {
            prop_assume!(v.iter().any(|x| (x - v[0]).abs() > 1e-3));
            let c = cfg(p, ShiftMode::MeanCentralise);
            let a = score_maxlogit_norm(&lv(&v), &c).unwrap();
            let w: Vec<f64> = v.iter().map(|x| x + eta).collect();
            let b = score_maxlogit_norm(&lv(&w), &c).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
