//! Cross-entropy and label-smoothing losses with their logit gradients.
//!
//! Targets are either one-hot labels or a soft distribution such as the true
//! conditional of a synthetic mixture, so the same code serves the empirical
//! loss and the "true" loss. Smoothing coefficients are allowed anywhere in
//! `(-inf, 1]`; negative values give negative label smoothing.

use crate::error::{Error, Result};
use crate::scores::{ProbVector, PROB_SUM_TOL};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    alpha: f64,
    num_classes: usize,
}

impl SmoothingConfig {
    pub fn new(alpha: f64, num_classes: usize) -> Result<Self> {
        if !alpha.is_finite() || alpha > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "smoothing alpha must be finite and <= 1, got {alpha}"
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        Ok(Self { alpha, num_classes })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn uniform_mass(&self) -> f64 {
        self.alpha / self.num_classes as f64
    }
}

/// A training target: a one-hot label, a soft distribution, or a smoothed
/// version of either. Always sums to one; entries may be negative only when
/// produced by negative smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution(Vec<f64>);

impl TargetDistribution {
    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if class >= num_classes {
            return Err(Error::invalid(format!(
                "class {class} out of range for K={num_classes}"
            )));
        }
        let mut v = vec![0.0; num_classes];
        v[class] = 1.0;
        Ok(Self(v))
    }

    pub fn soft(values: Vec<f64>) -> Result<Self> {
        Ok(Self(ProbVector::new(values)?.into_inner()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// `Some(class)` when exactly one entry is 1 and the rest are 0.
    pub fn one_hot_class(&self) -> Option<usize> {
        let mut hot = None;
        for (i, t) in self.0.iter().enumerate() {
            if *t == 1.0 && hot.is_none() {
                hot = Some(i);
            } else if *t != 0.0 {
                return None;
            }
        }
        hot
    }
}

impl From<ProbVector> for TargetDistribution {
    fn from(p: ProbVector) -> Self {
        Self(p.into_inner())
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("class count mismatch: {a} vs {b}")));
    }
    Ok(())
}

fn check_cfg(t: &TargetDistribution, cfg: &SmoothingConfig) -> Result<()> {
    check_len(t.num_classes(), cfg.num_classes())
}

/// `(1-α)·t + α/K`.
pub fn smooth_target(t: &TargetDistribution, cfg: &SmoothingConfig) -> Result<TargetDistribution> {
    check_cfg(t, cfg)?;
    let u = cfg.uniform_mass();
    let out: Vec<f64> = t.0.iter().map(|tk| (1.0 - cfg.alpha) * tk + u).collect();
    debug_assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e3 * PROB_SUM_TOL);
    Ok(TargetDistribution(out))
}

/// `-Σ t_k log π_k`. Terms with `t_k = 0` contribute nothing; a zero
/// probability under a positive target yields `+inf`.
pub fn loss_ce(pi: &ProbVector, t: &TargetDistribution) -> Result<f64> {
    check_len(pi.num_classes(), t.num_classes())?;
    let mut loss = 0.0;
    for (p, tk) in pi.as_slice().iter().zip(&t.0) {
        if *tk == 0.0 {
            continue;
        }
        if *p == 0.0 {
            return Ok(if *tk > 0.0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            });
        }
        loss -= tk * p.ln();
    }
    Ok(loss)
}

/// Cross-entropy against the smoothed target.
pub fn loss_ls(pi: &ProbVector, t: &TargetDistribution, cfg: &SmoothingConfig) -> Result<f64> {
    check_len(pi.num_classes(), t.num_classes())?;
    loss_ce(pi, &smooth_target(t, cfg)?)
}

/// `KL(u ‖ π) = Σ_k (1/K)(log(1/K) - log π_k)`.
pub fn kl_uniform(pi: &ProbVector) -> f64 {
    let k = pi.num_classes() as f64;
    let log_u = -(k.ln());
    pi.as_slice()
        .iter()
        .map(|p| {
            if *p == 0.0 {
                f64::INFINITY
            } else {
                (log_u - p.ln()) / k
            }
        })
        .sum()
}

/// `∂L_CE/∂v_k = π_k - t_k`.
pub fn grad_ce_logits(pi: &ProbVector, t: &TargetDistribution) -> Result<Vec<f64>> {
    check_len(pi.num_classes(), t.num_classes())?;
    Ok(pi
        .as_slice()
        .iter()
        .zip(&t.0)
        .map(|(p, tk)| p - tk)
        .collect())
}

/// `∂L_LS/∂v_k = π_k - [(1-α)t_k + α/K]`.
pub fn grad_ls_logits(
    pi: &ProbVector,
    t: &TargetDistribution,
    cfg: &SmoothingConfig,
) -> Result<Vec<f64>> {
    check_len(pi.num_classes(), t.num_classes())?;
    let smoothed = smooth_target(t, cfg)?;
    grad_ce_logits(pi, &smoothed)
}

/// Difference between the LS and CE logit gradients, `α·t_k - α/K`. It only
/// depends on the target.
pub fn grad_suppression(t: &TargetDistribution, cfg: &SmoothingConfig) -> Result<Vec<f64>> {
    check_cfg(t, cfg)?;
    let u = cfg.uniform_mass();
    Ok(t.0.iter().map(|tk| cfg.alpha * tk - u).collect())
}

/// Suppression acting on the max logit of a prediction whose true error
/// probability is `p_error`: `α(1 - P_error) - α/K`.
pub fn suppression_at_max(p_error: f64, cfg: &SmoothingConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_error) {
        return Err(Error::invalid(format!("p_error {p_error} outside [0, 1]")));
    }
    Ok(cfg.alpha * (1.0 - p_error) - cfg.uniform_mass())
}

/// Max-logit suppression under a one-hot label: `α - α/K` when the
/// prediction is correct, `-α/K` otherwise.
pub fn grad_suppression_onehot(correct: bool, cfg: &SmoothingConfig) -> f64 {
    let hit = if correct { cfg.alpha } else { 0.0 };
    hit - cfg.uniform_mass()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::{softmax, LogitVector};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn vclose(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            close(*x, *y, tol);
        }
    }

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn cfg(alpha: f64, k: usize) -> SmoothingConfig {
        SmoothingConfig::new(alpha, k).unwrap()
    }

    #[test]
    fn config_domain() {
        assert!(SmoothingConfig::new(1.0, 2).is_ok());
        assert!(SmoothingConfig::new(-3.0, 2).is_ok());
        assert!(matches!(
            SmoothingConfig::new(1.5, 2),
            Err(Error::InvalidConfig(_))
        ));
        assert!(SmoothingConfig::new(0.1, 1).is_err());
        assert!(SmoothingConfig::new(f64::NAN, 3).is_err());
    }

    #[test]
    fn smooth_target_examples() {
        let t = TargetDistribution::one_hot(0, 2).unwrap();
        vclose(
            smooth_target(&t, &cfg(0.2, 2)).unwrap().as_slice(),
            &[0.9, 0.1],
            1e-15,
        );
        vclose(
            smooth_target(&t, &cfg(-0.2, 2)).unwrap().as_slice(),
            &[1.1, -0.1],
            1e-15,
        );
        let soft = TargetDistribution::soft(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(smooth_target(&soft, &cfg(0.0, 3)).unwrap(), soft);
        assert!(smooth_target(&soft, &cfg(0.1, 4)).is_err());
    }

    #[test]
    fn one_hot_detection() {
        assert_eq!(
            TargetDistribution::one_hot(2, 4).unwrap().one_hot_class(),
            Some(2)
        );
        assert_eq!(
            TargetDistribution::soft(vec![0.5, 0.5])
                .unwrap()
                .one_hot_class(),
            None
        );
        assert!(TargetDistribution::one_hot(4, 4).is_err());
    }

    #[test]
    fn ce_examples() {
        let t0 = TargetDistribution::one_hot(0, 2).unwrap();
        close(loss_ce(&pv(&[0.5, 0.5]), &t0).unwrap(), 2f64.ln(), 1e-15);
        assert_eq!(loss_ce(&pv(&[1.0, 0.0]), &t0).unwrap(), 0.0);
        assert_eq!(loss_ce(&pv(&[0.0, 1.0]), &t0).unwrap(), f64::INFINITY);

        let p = pv(&[0.2, 0.3, 0.5]);
        let t = TargetDistribution::from(p.clone());
        let h = -(0.2f64 * 0.2f64.ln() + 0.3 * 0.3f64.ln() + 0.5 * 0.5f64.ln());
        close(loss_ce(&p, &t).unwrap(), h, 1e-15);
        // Gibbs: any other π costs more.
        assert!(loss_ce(&pv(&[0.25, 0.25, 0.5]), &t).unwrap() > h);
    }

    #[test]
    fn ls_examples() {
        let t0 = TargetDistribution::one_hot(0, 2).unwrap();
        let p = pv(&[0.8, 0.2]);
        assert_eq!(
            loss_ls(&p, &t0, &cfg(0.0, 2)).unwrap(),
            loss_ce(&p, &t0).unwrap()
        );
        let expect = -0.9 * 0.8f64.ln() - 0.1 * 0.2f64.ln();
        close(loss_ls(&p, &t0, &cfg(0.2, 2)).unwrap(), expect, 1e-15);
        close(expect, 0.361773, 1e-6);
        close(
            loss_ls(&pv(&[0.5, 0.5]), &t0, &cfg(0.2, 2)).unwrap(),
            2f64.ln(),
            1e-15,
        );
    }

    #[test]
    fn gradient_examples() {
        let t0 = TargetDistribution::one_hot(0, 2).unwrap();
        let p = pv(&[0.8, 0.2]);
        vclose(&grad_ce_logits(&p, &t0).unwrap(), &[-0.2, 0.2], 1e-15);
        vclose(
            &grad_ls_logits(&p, &t0, &cfg(0.2, 2)).unwrap(),
            &[-0.1, 0.1],
            1e-15,
        );
        assert_eq!(
            grad_ls_logits(&p, &t0, &cfg(0.0, 2)).unwrap(),
            grad_ce_logits(&p, &t0).unwrap()
        );
        let same = TargetDistribution::from(p.clone());
        vclose(&grad_ce_logits(&p, &same).unwrap(), &[0.0, 0.0], 0.0);

        // Negative smoothing: the non-target component never reaches zero.
        for p1 in [0.0, 0.3, 1.0] {
            let p = pv(&[1.0 - p1, p1]);
            let g = grad_ls_logits(&p, &t0, &cfg(-0.2, 2)).unwrap();
            close(g[1], p1 + 0.1, 1e-15);
            assert!(g[1] >= 0.1 - 1e-15);
        }
    }

    #[test]
    fn suppression_examples() {
        let t0 = TargetDistribution::one_hot(0, 5).unwrap();
        vclose(
            &grad_suppression(&t0, &cfg(0.2, 5)).unwrap(),
            &[0.16, -0.04, -0.04, -0.04, -0.04],
            1e-15,
        );
        vclose(
            &grad_suppression(&t0, &cfg(0.0, 5)).unwrap(),
            &[0.0; 5],
            0.0,
        );
        let u = TargetDistribution::soft(vec![0.2; 5]).unwrap();
        vclose(
            &grad_suppression(&u, &cfg(0.2, 5)).unwrap(),
            &[0.0; 5],
            1e-16,
        );

        close(suppression_at_max(0.3, &cfg(0.2, 5)).unwrap(), 0.10, 1e-15);
        close(
            suppression_at_max(1.0 - 1.0 / 5.0, &cfg(0.2, 5)).unwrap(),
            0.0,
            1e-15,
        );
        assert_eq!(suppression_at_max(0.7, &cfg(0.0, 5)).unwrap(), 0.0);
        assert!(suppression_at_max(1.5, &cfg(0.2, 5)).is_err());

        close(grad_suppression_onehot(true, &cfg(0.2, 5)), 0.16, 1e-15);
        close(grad_suppression_onehot(false, &cfg(0.2, 5)), -0.04, 1e-15);
        assert_eq!(grad_suppression_onehot(true, &cfg(0.0, 5)), 0.0);
        assert_eq!(grad_suppression_onehot(false, &cfg(0.0, 5)), 0.0);
    }

    #[test]
    fn ce_gradient_matches_central_differences() {
        let v = vec![0.3, -1.2, 2.0, 0.7];
        let t = TargetDistribution::soft(vec![0.1, 0.2, 0.6, 0.1]).unwrap();
        let loss = |v: &[f64]| {
            let pi = softmax(&LogitVector::new(v.to_vec()).unwrap());
            loss_ce(&pi, &t).unwrap()
        };
        let analytic = grad_ce_logits(&softmax(&LogitVector::new(v.clone()).unwrap()), &t).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for k in 0..v.len() {
            let mut up = v.clone();
            let mut dn = v.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            worst = worst.max((fd - analytic[k]).abs() / scale);
        }
        assert!(worst < 1e-6, "relative error {worst}");
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01f64..1.0, k).prop_map(|w| {
            let s: f64 = w.iter().sum();
            let mut p: Vec<f64> = w.iter().map(|x| x / s).collect();
            let head: f64 = p[1..].iter().sum();
            p[0] = 1.0 - head;
            p
        })
    }

    proptest! {
        #[test]
        fn suppression_is_ls_minus_ce(
            (p, t) in (2usize..10).prop_flat_map(|k| (simplex(k), simplex(k))),
            alpha in 0.0f64..=1.0,
        ) {
            let k = p.len();
            let pi = ProbVector::new(p).unwrap();
            let t = TargetDistribution::soft(t).unwrap();
            let c = cfg(alpha, k);
            let ls = grad_ls_logits(&pi, &t, &c).unwrap();
            let ce = grad_ce_logits(&pi, &t).unwrap();
            let sup = grad_suppression(&t, &c).unwrap();
            for i in 0..k {
                prop_assert!((ls[i] - ce[i] - sup[i]).abs() <= 1e-14);
            }
            prop_assert!(ls.iter().sum::<f64>().abs() <= 1e-12);
            prop_assert!(ce.iter().sum::<f64>().abs() <= 1e-12);
        }

        #[test]
        fn ls_decomposes_into_ce_plus_kl(
            (p, t) in (2usize..10).prop_flat_map(|k| (simplex(k), simplex(k))),
            alpha in 0.0f64..=1.0,
        ) {
            let k = p.len();
            let pi = ProbVector::new(p).unwrap();
            let t = TargetDistribution::soft(t).unwrap();
            let lhs = loss_ls(&pi, &t, &cfg(alpha, k)).unwrap();
            let rhs = (1.0 - alpha) * loss_ce(&pi, &t).unwrap()
                + alpha * kl_uniform(&pi)
                + alpha * (k as f64).ln();
            prop_assert!((lhs - rhs).abs() <= 1e-10);
        }

        #[test]
        fn suppression_at_max_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, alpha in 0.01f64..1.0) {
            prop_assume!(a < b);
            let pos = cfg(alpha, 5);
            let neg = cfg(-alpha, 5);
            prop_assert!(suppression_at_max(a, &pos).unwrap() > suppression_at_max(b, &pos).unwrap());
            prop_assert!(suppression_at_max(a, &neg).unwrap() < suppression_at_max(b, &neg).unwrap());
        }
    }
}
