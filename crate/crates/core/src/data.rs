//! Synthetic Gaussian-mixture data with an exact Bayes posterior, a shifted
//! variant of it, and the logit-record file format.
//!
//! Components are isotropic with a shared standard deviation, so the class
//! posterior at `x` is a softmax of `log prior_k - ‖x - μ_k‖² / (2σ²)`.
//!
//! Randomness comes from ChaCha8 seeded with the spec's 64-bit seed. Labels
//! are drawn by inverse CDF on a uniform `f64`, coordinates with the
//! `rand_distr` standard normal. [`RNG_ALGORITHM`] names this scheme and is
//! written into every run manifest.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scores::{softmax_into, LogitVector, ProbVector};

pub const RNG_ALGORITHM: &str =
    "chacha8/rand_chacha-0.9;labels=inverse-cdf;normal=rand_distr-0.5-ziggurat";

pub const DESK_CLASSES: usize = 8;
pub const DESK_RADIUS: f64 = 4.3;
pub const DESK_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    means: Vec<Vec<f64>>,
    sigma: f64,
    priors: Vec<f64>,
    seed: u64,
}

impl MixtureSpec {
    pub fn new(means: Vec<Vec<f64>>, sigma: f64, priors: Vec<f64>, seed: u64) -> Result<Self> {
        let k = means.len();
        if k < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 components, got {k}"
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::InvalidConfig(
                "means must share a dimension >= 1".into(),
            ));
        }
        if means.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("means must be finite".into()));
        }
        for i in 0..k {
            for j in i + 1..k {
                if means[i] == means[j] {
                    return Err(Error::InvalidConfig(format!("means {i} and {j} coincide")));
                }
            }
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be > 0, got {sigma}"
            )));
        }
        if priors.len() != k {
            return Err(Error::InvalidConfig(format!(
                "{} priors for {k} components",
                priors.len()
            )));
        }
        ProbVector::new(priors.clone())
            .map_err(|e| Error::InvalidConfig(format!("priors: {e}")))?;
        Ok(Self {
            means,
            sigma,
            priors,
            seed,
        })
    }

    /// `k` equal-prior components evenly spaced on a circle in the plane.
    pub fn circle(k: usize, radius: f64, sigma: f64, seed: u64) -> Result<Self> {
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(means, sigma, vec![1.0 / k as f64; k], seed)
    }

    /// [`DESK_CLASSES`] classes on a circle of radius [`DESK_RADIUS`] with
    /// spread [`DESK_SIGMA`]; the Bayes error is close to 10%.
    pub fn desk_default(seed: u64) -> Self {
        Self::circle(DESK_CLASSES, DESK_RADIUS, DESK_SIGMA, seed).expect("valid default spec")
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// Canonical text form, used for hashing.
    pub fn canonical(&self) -> String {
        let mut s = format!(
            "k={};d={};sigma={:e};priors=",
            self.num_classes(),
            self.dim(),
            self.sigma
        );
        for p in &self.priors {
            let _ = write!(s, "{p:e},");
        }
        s.push_str(";means=");
        for m in &self.means {
            for x in m {
                let _ = write!(s, "{x:e},");
            }
            s.push('|');
        }
        let _ = write!(s, ";seed={};rng={RNG_ALGORITHM}", self.seed);
        s
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical`].
    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Exact class posterior at `x`.
    pub fn posterior(&self, x: &[f64]) -> Result<ProbVector> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "point has dimension {}, spec has {}",
                x.len(),
                self.dim()
            )));
        }
        let mut out = vec![0.0; self.num_classes()];
        self.posterior_into(x, &mut out);
        Ok(ProbVector::from_normalised(out))
    }

    fn posterior_into(&self, x: &[f64], out: &mut [f64]) {
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let log_joint: Vec<f64> = self
            .means
            .iter()
            .zip(&self.priors)
            .map(|(m, p)| {
                let d2: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                p.ln() - d2 * inv
            })
            .collect();
        softmax_into(&log_joint, out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    pub pibar: ProbVector,
}

/// Draws `n` labelled points together with their exact posterior.
/// Deterministic in the spec seed.
pub fn sample_dataset(spec: &MixtureSpec, n: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cdf = Vec::with_capacity(spec.num_classes());
    let mut acc = 0.0;
    for p in &spec.priors {
        acc += p;
        cdf.push(acc);
    }
    let last = spec.num_classes() - 1;
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let label = cdf.iter().position(|c| u < *c).unwrap_or(last);
            let x: Vec<f64> = spec.means[label]
                .iter()
                .map(|m| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + spec.sigma * z
                })
                .collect();
            let mut pibar = vec![0.0; spec.num_classes()];
            spec.posterior_into(&x, &mut pibar);
            Sample {
                x,
                label,
                pibar: ProbVector::from_normalised(pibar),
            }
        })
        .collect()
}

/// Translates every mean by `delta`.
pub fn shift_spec(spec: &MixtureSpec, delta: &[f64]) -> Result<MixtureSpec> {
    if delta.len() != spec.dim() {
        return Err(Error::invalid(format!(
            "shift has dimension {}, spec has {}",
            delta.len(),
            spec.dim()
        )));
    }
    let means = spec
        .means
        .iter()
        .map(|m| m.iter().zip(delta).map(|(a, d)| a + d).collect())
        .collect();
    MixtureSpec::new(means, spec.sigma, spec.priors.clone(), spec.seed)
}

/// `1 - π̄_predicted`.
pub fn p_error_of(pibar: &ProbVector, predicted: usize) -> Result<f64> {
    let p = pibar.as_slice().get(predicted).ok_or_else(|| {
        Error::invalid(format!(
            "predicted class {predicted} out of range for K={}",
            pibar.num_classes()
        ))
    })?;
    Ok((1.0 - p).clamp(0.0, 1.0))
}

/// Monte-Carlo estimate of the Bayes risk, `E[1 - max_k π̄_k(x)]`.
pub fn bayes_risk_monte_carlo(spec: &MixtureSpec, n: usize) -> f64 {
    let data = sample_dataset(spec, n);
    data.iter().map(|s| 1.0 - s.pibar.max()).sum::<f64>() / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitRecord {
    pub logits: LogitVector,
    pub label: usize,
    pub source_tag: Option<String>,
}

impl LogitRecord {
    pub fn new(logits: LogitVector, label: usize, source_tag: Option<String>) -> Result<Self> {
        if label >= logits.num_classes() {
            return Err(Error::invalid(format!(
                "label {label} out of range for K={}",
                logits.num_classes()
            )));
        }
        Ok(Self {
            logits,
            label,
            source_tag,
        })
    }

    pub fn predicted(&self) -> usize {
        self.logits.argmax()
    }

    pub fn is_correct(&self) -> bool {
        self.predicted() == self.label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitFile {
    pub num_classes: usize,
    pub records: Vec<LogitRecord>,
}

const HEADER_PREFIX: &str = "# screject-logits v1 K=";

fn check_tag(tag: &str) -> Result<()> {
    if tag.is_empty() || tag.contains([',', '\n', '\r']) {
        return Err(Error::invalid(format!(
            "source tag {tag:?} must be non-empty without commas or newlines"
        )));
    }
    Ok(())
}

/// Renders records in the logit-record format. Values use 17 significant
/// digits so they parse back to the same `f64`.
pub fn format_logit_records(num_classes: usize, records: &[LogitRecord]) -> Result<String> {
    let mut out = format!("{HEADER_PREFIX}{num_classes}\n");
    for (i, r) in records.iter().enumerate() {
        if r.logits.num_classes() != num_classes {
            return Err(Error::Format(format!(
                "record {i} has {} logits, file declares K={num_classes}",
                r.logits.num_classes()
            )));
        }
        for v in r.logits.as_slice() {
            let _ = write!(out, "{v:.16e},");
        }
        let _ = write!(out, "{}", r.label);
        if let Some(tag) = &r.source_tag {
            check_tag(tag)?;
            out.push(',');
            out.push_str(tag);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_logit_records(path: &Path, num_classes: usize, records: &[LogitRecord]) -> Result<()> {
    let text = format_logit_records(num_classes, records)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn parse_logit_records(path: &Path, text: &str) -> Result<LogitFile> {
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .map(|(_, l)| l.trim_end())
        .ok_or_else(|| Error::Format(format!("{}: empty file, missing header", path.display())))?;
    let k: usize = header
        .strip_prefix(HEADER_PREFIX)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| {
            Error::Format(format!(
                "{}: bad header {header:?}, expected '{HEADER_PREFIX}<K>'",
                path.display()
            ))
        })?;
    if k < 2 {
        return Err(Error::Format(format!(
            "{}: K={k} must be at least 2",
            path.display()
        )));
    }

    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line + 1,
        msg,
    };
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let tag = match fields.len() {
            n if n == k + 1 => None,
            n if n == k + 2 => {
                let t = fields[k + 1].trim();
                check_tag(t).map_err(|e| parse_err(idx, e.to_string()))?;
                Some(t.to_string())
            }
            n => {
                return Err(Error::Format(format!(
                    "{}:{}: {n} fields, expected {} or {} for K={k}",
                    path.display(),
                    idx + 1,
                    k + 1,
                    k + 2
                )))
            }
        };
        let logits = fields[..k]
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(idx, format!("bad logit {f:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let logits = LogitVector::new(logits).map_err(|e| parse_err(idx, e.to_string()))?;
        let label: usize = fields[k]
            .trim()
            .parse()
            .map_err(|e| parse_err(idx, format!("bad label {:?}: {e}", fields[k])))?;
        if label >= k {
            return Err(Error::Format(format!(
                "{}:{}: label {label} out of range for K={k}",
                path.display(),
                idx + 1
            )));
        }
        records.push(LogitRecord {
            logits,
            label,
            source_tag: tag,
        });
    }
    Ok(LogitFile {
        num_classes: k,
        records,
    })
}

pub fn load_logit_records(path: &Path) -> Result<LogitFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_logit_records(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two(dist: f64, sigma: f64) -> MixtureSpec {
        MixtureSpec::new(
            vec![vec![0.0, 0.0], vec![dist, 0.0]],
            sigma,
            vec![0.5, 0.5],
            3,
        )
        .unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(MixtureSpec::new(vec![vec![0.0]], 1.0, vec![1.0], 0).is_err());
        assert!(MixtureSpec::new(vec![vec![0.0], vec![0.0]], 1.0, vec![0.5, 0.5], 0).is_err());
        assert!(MixtureSpec::new(vec![vec![0.0], vec![1.0]], 0.0, vec![0.5, 0.5], 0).is_err());
        assert!(MixtureSpec::new(vec![vec![0.0], vec![1.0]], 1.0, vec![0.6, 0.5], 0).is_err());
        assert!(MixtureSpec::new(vec![vec![0.0], vec![1.0, 2.0]], 1.0, vec![0.5, 0.5], 0).is_err());
    }

    #[test]
    fn posterior_examples() {
        let s = two(2.0, 1.0);
        let mid = s.posterior(&[1.0, 0.0]).unwrap();
        assert!((mid.as_slice()[0] - 0.5).abs() < 1e-15);

        let at0 = s.posterior(&[0.0, 0.0]).unwrap();
        let e2 = 2f64.exp();
        assert!((at0.as_slice()[0] - e2 / (1.0 + e2)).abs() < 1e-15);
        assert!((at0.as_slice()[0] - 0.880797).abs() < 1e-6);

        let wide = two(2.0, 1e4).posterior(&[0.0, 0.0]).unwrap();
        assert!((wide.as_slice()[0] - 0.5).abs() < 1e-7);
        assert!(s.posterior(&[1.0]).is_err());
    }

    #[test]
    fn posterior_ignores_common_likelihood_scale() {
        // Scaling every prior by the same factor multiplies every likelihood
        // term equally and must not move the posterior.
        let s = MixtureSpec::circle(5, 2.0, 0.7, 1).unwrap();
        let x = [0.3, -0.4];
        let a = s.posterior(&x).unwrap();
        let mut out = vec![0.0; 5];
        let inv = 1.0 / (2.0 * 0.7 * 0.7);
        let logs: Vec<f64> = s
            .means()
            .iter()
            .map(|m| (0.2f64 * 1e-3).ln() - ((m[0] - x[0]).powi(2) + (m[1] - x[1]).powi(2)) * inv)
            .collect();
        softmax_into(&logs, &mut out);
        for (p, q) in a.as_slice().iter().zip(&out) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = MixtureSpec::desk_default(11);
        let a = sample_dataset(&s, 200);
        let b = sample_dataset(&s, 200);
        assert_eq!(a, b);
        let c = sample_dataset(&s.with_seed(12), 200);
        assert_ne!(a, c);
        for smp in &a {
            let sum: f64 = smp.pibar.as_slice().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_examples() {
        let s = MixtureSpec::circle(4, 2.0, 1.0, 0).unwrap();
        assert_eq!(shift_spec(&s, &[0.0, 0.0]).unwrap(), s);
        let moved = shift_spec(&s, &[3.0, 0.0]).unwrap();
        for (a, b) in s.means().iter().zip(moved.means()) {
            assert_eq!(b[0], a[0] + 3.0);
            assert_eq!(b[1], a[1]);
        }
        let dist = |m: &[Vec<f64>], i: usize, j: usize| {
            ((m[i][0] - m[j][0]).powi(2) + (m[i][1] - m[j][1]).powi(2)).sqrt()
        };
        for i in 0..4 {
            for j in 0..4 {
                assert!((dist(s.means(), i, j) - dist(moved.means(), i, j)).abs() < 1e-12);
            }
        }
        assert!(shift_spec(&s, &[1.0]).is_err());
    }

    #[test]
    fn p_error_examples() {
        let p = ProbVector::new(vec![0.9, 0.1]).unwrap();
        assert!((p_error_of(&p, 0).unwrap() - 0.1).abs() < 1e-15);
        let h = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(p_error_of(&h, h.argmax()).unwrap(), 0.5);
        let one = ProbVector::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(p_error_of(&one, 1).unwrap(), 0.0);
        assert!(p_error_of(&one, 2).is_err());
    }

    #[test]
    fn bayes_classifier_matches_monte_carlo_risk() {
        let spec = two(2.0, 1.0).with_seed(99);
        let reference = bayes_risk_monte_carlo(&spec.with_seed(1_000_003), 1_000_000);
        let n = 20_000;
        let data = sample_dataset(&spec, n);
        let errors = data.iter().filter(|s| s.pibar.argmax() != s.label).count();
        let emp = errors as f64 / n as f64;
        let se = (reference * (1.0 - reference) / n as f64).sqrt();
        assert!(
            (emp - reference).abs() <= 3.0 * se,
            "{emp} vs {reference} (se {se})"
        );
    }

    #[test]
    fn hash_is_stable_and_seed_sensitive() {
        let s = MixtureSpec::desk_default(1);
        assert_eq!(s.hash_hex(), s.clone().hash_hex());
        assert_eq!(s.hash_hex().len(), 16);
        assert_ne!(s.hash_hex(), s.with_seed(2).hash_hex());
    }

    fn rec(v: &[f64], label: usize, tag: Option<&str>) -> LogitRecord {
        LogitRecord::new(
            LogitVector::new(v.to_vec()).unwrap(),
            label,
            tag.map(String::from),
        )
        .unwrap()
    }

    #[test]
    fn parse_examples() {
        let p = Path::new("mem");
        let text = format_logit_records(
            3,
            &[
                rec(&[0.1, 0.2, 0.3], 2, None),
                rec(&[1.0, -2.0, 0.5], 0, Some("shift")),
            ],
        )
        .unwrap();
        let f = parse_logit_records(p, &text).unwrap();
        assert_eq!((f.num_classes, f.records.len()), (3, 2));
        assert_eq!(f.records[1].source_tag.as_deref(), Some("shift"));

        let empty = parse_logit_records(p, "# screject-logits v1 K=4\n").unwrap();
        assert_eq!((empty.num_classes, empty.records.len()), (4, 0));

        let bad_label = parse_logit_records(p, "# screject-logits v1 K=2\n0.1,0.2,2\n");
        assert!(matches!(bad_label, Err(Error::Format(_))));

        let bad_k = parse_logit_records(p, "# screject-logits v1 K=2\n0.1,0.2,0.3,0.4,1,x\n");
        assert!(matches!(bad_k, Err(Error::Format(_))));

        match parse_logit_records(p, "# screject-logits v1 K=2\n0.1,0.2,1\n0.1,zz,1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_logit_records(p, ""), Err(Error::Format(_))));
        assert!(matches!(
            parse_logit_records(p, "K=3\n"),
            Err(Error::Format(_))
        ));
        assert!(format_logit_records(2, &[rec(&[0.0, 1.0], 0, Some("a,b"))]).is_err());
    }

    proptest! {
        #[test]
        fn records_round_trip_exactly(
            rows in proptest::collection::vec(
                (proptest::collection::vec(-1e6f64..1e6, 4), 0usize..4, any::<bool>()),
                0..20,
            )
        ) {
            let records: Vec<LogitRecord> = rows
                .iter()
                .map(|(v, l, t)| rec(v, *l, t.then_some("shift")))
                .collect();
            let text = format_logit_records(4, &records).unwrap();
            let back = parse_logit_records(Path::new("mem"), &text).unwrap();
            prop_assert_eq!(back.records, records);
        }
    }
}
