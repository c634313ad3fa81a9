//! Softmax and the scalar uncertainty scores.
//!
//! Every score follows the same orientation: a larger value means the
//! prediction is more uncertain and should be rejected first. MSP and DOCTOR
//! are therefore negated, entropy is used as is and energy is the negated
//! log-sum-exp of the logits.
//!
//! All arithmetic is `f64`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// A vector of `K >= 2` finite logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite logit {} at index {i}",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn max(&self) -> f64 {
        max_of(&self.0)
    }

    /// Index of the largest logit; the first one wins on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl AsRef<[f64]> for LogitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A categorical distribution over `K >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "probability vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(i) = values
            .iter()
            .position(|p| !p.is_finite() || *p < 0.0 || *p > 1.0)
        {
            return Err(Error::invalid(format!(
                "probability {} at index {i} is outside [0, 1]",
                values[i]
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self(values))
    }

    /// Uniform distribution over `k` classes.
    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    /// Skips validation; callers guarantee the invariants hold.
    pub(crate) fn from_normalised(values: Vec<f64>) -> Self {
        debug_assert!(values.len() >= 2);
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn max(&self) -> f64 {
        max_of(&self.0)
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable `log Σ exp v_k`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let m = max_of(values);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// Softmax of raw slice values, written into `out`.
pub(crate) fn softmax_into(values: &[f64], out: &mut [f64]) {
    let m = max_of(values);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(values) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(v: &LogitVector) -> ProbVector {
    let mut out = vec![0.0; v.num_classes()];
    softmax_into(v.as_slice(), &mut out);
    ProbVector::from_normalised(out)
}

/// `U = -max_k π_k`.
pub fn score_msp(pi: &ProbVector) -> f64 {
    -pi.max()
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn score_entropy(pi: &ProbVector) -> f64 {
    -pi.as_slice()
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// DOCTOR score, `U = -‖π‖₂`.
pub fn score_doctor(pi: &ProbVector) -> f64 {
    -pi.as_slice().iter().map(|p| p * p).sum::<f64>().sqrt()
}

/// Energy score, `U = -log Σ exp v_k`.
pub fn score_energy(v: &LogitVector) -> f64 {
    -logsumexp(v.as_slice())
}

/// Scores computed from logits alone, without a fitted normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreKind {
    Msp,
    Entropy,
    Doctor,
    Energy,
    /// Max of the p-normalised logits; needs a [`crate::normalization::NormConfig`].
    MaxLogitNorm,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 5] = [
        ScoreKind::Msp,
        ScoreKind::Entropy,
        ScoreKind::Doctor,
        ScoreKind::Energy,
        ScoreKind::MaxLogitNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Msp => "msp",
            ScoreKind::Entropy => "entropy",
            ScoreKind::Doctor => "doctor",
            ScoreKind::Energy => "energy",
            ScoreKind::MaxLogitNorm => "maxlogit-norm",
        }
    }

    /// Evaluates a softmax-family score. Returns `None` for
    /// [`ScoreKind::MaxLogitNorm`], which needs its own configuration.
    pub fn softmax_score(self, v: &LogitVector) -> Option<f64> {
        match self {
            ScoreKind::Msp => Some(score_msp(&softmax(v))),
            ScoreKind::Entropy => Some(score_entropy(&softmax(v))),
            ScoreKind::Doctor => Some(score_doctor(&softmax(v))),
            ScoreKind::Energy => Some(score_energy(v)),
            ScoreKind::MaxLogitNorm => None,
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown score '{s}' (expected msp|entropy|doctor|energy|maxlogit-norm)"
                ))
            })
    }
}
