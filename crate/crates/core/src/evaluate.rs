//! Scoring logit records and computing the standard selective metrics.

use crate::data::LogitRecord;
use crate::error::{Error, Result};
use crate::normalization::{normalise_logits, score_maxlogit_norm, search_p, NormConfig, PSearch};
use crate::scores::{softmax, ScoreKind};
use crate::selective::{
    aurc, coverage_at_risk, rc_curve, risk_at_coverage, AuxStats, RcCurve, ScoredPrediction,
};

/// How uncertainty is computed from a logit vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    Softmax(ScoreKind),
    MaxLogitNorm(NormConfig),
}

impl Scorer {
    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Softmax(k) => k.name(),
            Scorer::MaxLogitNorm(_) => ScoreKind::MaxLogitNorm.name(),
        }
    }
}

/// Scores every record. With `aux_norm`, also attaches `v_max`, `π_max` and
/// the normalised max logit under that config. Sample ids are record
/// indices.
pub fn score_records(
    records: &[LogitRecord],
    scorer: &Scorer,
    aux_norm: Option<&NormConfig>,
) -> Result<Vec<ScoredPrediction>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let u = match scorer {
                Scorer::Softmax(kind) => kind
                    .softmax_score(&r.logits)
                    .ok_or_else(|| Error::invalid("maxlogit-norm needs a normalisation config"))?,
                Scorer::MaxLogitNorm(cfg) => score_maxlogit_norm(&r.logits, cfg)?,
            };
            let mut p = ScoredPrediction::new(i as u64, u, r.is_correct());
            if let Some(norm) = aux_norm {
                p = p.with_aux(AuxStats {
                    v_max: r.logits.max(),
                    pi_max: softmax(&r.logits).max(),
                    v_prime_max: normalise_logits(&r.logits, norm)?.max(),
                });
            }
            p.source_tag = r.source_tag.clone();
            Ok(p)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub score: &'static str,
    pub n: usize,
    pub error_rate: f64,
    pub aurc: f64,
    pub coverage_at_risk: Vec<(f64, f64)>,
    pub risk_at_coverage: Vec<(f64, f64)>,
    /// Present when the score needed a validation p search.
    pub p_search: Option<PSearch>,
    pub curve: RcCurve,
}

/// Computes the metrics of `eval` under `score`. For
/// [`ScoreKind::MaxLogitNorm`] the norm order is chosen on `val` first.
pub fn evaluate(
    eval: &[LogitRecord],
    val: Option<&[LogitRecord]>,
    score: ScoreKind,
    norm: &NormConfig,
    risks: &[f64],
    coverages: &[f64],
) -> Result<Metrics> {
    if eval.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let (scorer, p_search) = match score {
        ScoreKind::MaxLogitNorm => {
            let val = val.ok_or_else(|| {
                Error::invalid("maxlogit-norm needs validation records for the p search")
            })?;
            let search = search_p(val, norm)?;
            (
                Scorer::MaxLogitNorm(norm.with_p(search.p_best)?),
                Some(search),
            )
        }
        kind => (Scorer::Softmax(kind), None),
    };
    let preds = score_records(eval, &scorer, None)?;
    let curve = rc_curve(&preds)?;
    let coverage_at_risk = risks
        .iter()
        .map(|r| (*r, coverage_at_risk(&curve, *r)))
        .collect();
    let risk_at_coverage = coverages
        .iter()
        .map(|c| Ok((*c, risk_at_coverage(&curve, *c)?)))
        .collect::<Result<_>>()?;
    Ok(Metrics {
        score: scorer.name(),
        n: eval.len(),
        error_rate: curve.full_coverage_risk(),
        aurc: aurc(&curve),
        coverage_at_risk,
        risk_at_coverage,
        p_search,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::LogitVector;

    fn rec(v: &[f64], label: usize) -> LogitRecord {
        LogitRecord::new(LogitVector::new(v.to_vec()).unwrap(), label, None).unwrap()
    }

    #[test]
    fn msp_metrics_on_small_set() {
        // MSP ordering: most confident first.
        let recs = vec![
            rec(&[4.0, 0.0], 0),
            rec(&[3.0, 0.0], 0),
            rec(&[2.0, 0.0], 1),
            rec(&[1.0, 0.0], 0),
        ];
        let m = evaluate(
            &recs,
            None,
            ScoreKind::Msp,
            &NormConfig::default(),
            &[0.1],
            &[0.75],
        )
        .unwrap();
        assert!((m.aurc - 7.0 / 48.0).abs() < 1e-15);
        assert_eq!(m.error_rate, 0.25);
        assert_eq!(m.coverage_at_risk, vec![(0.1, 0.5)]);
        assert_eq!(m.risk_at_coverage, vec![(0.75, 1.0 / 3.0)]);
        assert!(m.p_search.is_none());
    }

    #[test]
    fn maxlogit_norm_requires_validation() {
        let recs = vec![rec(&[1.0, 0.0], 0), rec(&[0.0, 2.0], 1)];
        assert!(evaluate(
            &recs,
            None,
            ScoreKind::MaxLogitNorm,
            &NormConfig::default(),
            &[],
            &[]
        )
        .is_err());
        let m = evaluate(
            &recs,
            Some(&recs),
            ScoreKind::MaxLogitNorm,
            &NormConfig::default(),
            &[],
            &[],
        )
        .unwrap();
        let s = m.p_search.unwrap();
        assert_eq!(s.p_best, 1.0);
        assert_eq!(s.per_p.len(), 8);
    }
}
