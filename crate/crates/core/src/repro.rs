//! The full desk-scale experiment: CE and label-smoothed models over several
//! seeds, evaluated with MSP and the normalised max logit, plus the
//! directional checks that compare them.
//!
//! Seed `s` draws its training, validation, evaluation and shifted sets from
//! dataset seeds `10s+1 .. 10s+4` and initialises every model with `10s+5`,
//! so models of different α share data and initialisation.

use rayon::prelude::*;

use crate::analysis::{conditional_vmax_stats, vmax_separation, VmaxSeparation, WindowConfig};
use crate::data::{sample_dataset, shift_spec, MixtureSpec, Sample};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, score_records, Scorer};
use crate::normalization::NormConfig;
use crate::scores::ScoreKind;
use crate::selective::{coverage_at_risk, shift_mix_report, RcCurve};
use crate::trainer::{logit_records, train_on, TrainConfig};

pub const DEFAULT_ALPHAS: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "SCREJECT_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct ReproConfig {
    pub spec: MixtureSpec,
    pub seeds: Vec<u64>,
    pub alphas: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_eval: usize,
    pub n_shift: usize,
    /// Shift length in units of σ, applied along the first coordinate.
    pub shift_sigmas: f64,
    pub train: TrainConfig,
    pub norm: NormConfig,
    /// `π_max` window width for the `v_max` statistics.
    pub window: f64,
    /// Pooled coverage of the shift-mix report.
    pub shift_coverage: f64,
    /// Risk target for coverage@risk, as a multiple of the CE error rate.
    pub risk_factor: f64,
    pub quick: bool,
}

impl Default for ReproConfig {
    fn default() -> Self {
        Self {
            spec: MixtureSpec::desk_default(0),
            seeds: (0..5).collect(),
            alphas: DEFAULT_ALPHAS.to_vec(),
            n_train: 20_000,
            n_val: 2_000,
            n_eval: 5_000,
            n_shift: 5_000,
            shift_sigmas: 2.0,
            train: TrainConfig::default(),
            norm: NormConfig::default(),
            window: 0.05,
            shift_coverage: 0.1,
            risk_factor: 0.5,
            quick: false,
        }
    }
}

impl ReproConfig {
    /// Smaller sets and fewer epochs; verdicts become advisory.
    pub fn quick() -> Self {
        let base = Self::default();
        Self {
            n_train: 4_000,
            n_val: 1_000,
            n_eval: 2_000,
            n_shift: 2_000,
            train: TrainConfig {
                epochs: 10,
                ..base.train.clone()
            },
            quick: true,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !self.alphas.contains(&0.0) {
            return bad("the alpha list must include 0 (the CE baseline)");
        }
        if self.alphas.len() < 2 {
            return bad("the alpha list needs at least one smoothed model");
        }
        for a in &self.alphas {
            TrainConfig {
                alpha: *a,
                ..self.train.clone()
            }
            .validate()?;
        }
        if [self.n_train, self.n_val, self.n_eval, self.n_shift].contains(&0) {
            return bad("dataset sizes must be positive");
        }
        if !(self.shift_coverage > 0.0 && self.shift_coverage <= 1.0) {
            return bad("shift coverage must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn low_confidence(&self) -> bool {
        self.seeds.len() < 5
    }

    pub fn shift_delta(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.spec.dim()];
        d[0] = self.shift_sigmas * self.spec.sigma();
        d
    }
}

/// Metrics of one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelResult {
    pub seed: u64,
    pub alpha: f64,
    pub final_loss: f64,
    pub error_rate: f64,
    pub aurc_msp: f64,
    pub aurc_norm: f64,
    pub p_best: f64,
    pub separation: VmaxSeparation,
    pub shift_accepted: usize,
    pub shift_errors: usize,
    pub id_errors: usize,
    /// MSP curve on the evaluation set; coverage@risk is read from it once
    /// the CE error of the same seed is known.
    pub curve: RcCurve,
}

/// The four datasets of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedData {
    pub seed: u64,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub shift: Vec<Sample>,
}

pub fn seed_data(cfg: &ReproConfig, seed: u64) -> Result<SeedData> {
    let shifted = shift_spec(&cfg.spec, &cfg.shift_delta())?;
    let base = seed.wrapping_mul(10);
    Ok(SeedData {
        seed,
        train: sample_dataset(&cfg.spec.with_seed(base + 1), cfg.n_train),
        val: sample_dataset(&cfg.spec.with_seed(base + 2), cfg.n_val),
        eval: sample_dataset(&cfg.spec.with_seed(base + 3), cfg.n_eval),
        shift: sample_dataset(&shifted.with_seed(base + 4), cfg.n_shift),
    })
}

/// Worker count from [`THREADS_ENV`], falling back to rayon's default.
pub fn worker_count() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
}

pub fn model_seed(seed: u64) -> u64 {
    seed.wrapping_mul(10) + 5
}

pub fn model_config(cfg: &ReproConfig, seed: u64, alpha: f64) -> TrainConfig {
    TrainConfig {
        alpha,
        seed: model_seed(seed),
        ..cfg.train.clone()
    }
}

fn run_model(cfg: &ReproConfig, data: &SeedData, alpha: f64) -> Result<ModelResult> {
    let tcfg = model_config(cfg, data.seed, alpha);
    let run = train_on(&data.train, cfg.spec.num_classes(), &tcfg)?;
    let model = &run.model;
    let val = logit_records(model, &data.val, None)?;
    let eval = logit_records(model, &data.eval, None)?;
    let shift = logit_records(model, &data.shift, Some("shift"))?;

    let msp = evaluate(&eval, None, ScoreKind::Msp, &cfg.norm, &[], &[])?;
    let norm = evaluate(
        &eval,
        Some(&val),
        ScoreKind::MaxLogitNorm,
        &cfg.norm,
        &[],
        &[],
    )?;
    let scorer = Scorer::Softmax(ScoreKind::Msp);
    let preds = score_records(&eval, &scorer, Some(&cfg.norm))?;
    let separation = vmax_separation(&conditional_vmax_stats(
        &preds,
        &WindowConfig::new(cfg.window),
    )?);
    let shift_preds = score_records(&shift, &scorer, None)?;
    let mix = shift_mix_report(&preds, &shift_preds, cfg.shift_coverage)?;

    Ok(ModelResult {
        seed: data.seed,
        alpha,
        final_loss: run.epoch_losses.last().copied().unwrap_or(f64::NAN),
        error_rate: msp.error_rate,
        aurc_msp: msp.aurc,
        aurc_norm: norm.aurc,
        p_best: norm.p_search.map_or(f64::NAN, |s| s.p_best),
        separation,
        shift_accepted: mix.shifted.count,
        shift_errors: mix.shifted.errors,
        id_errors: mix.in_distribution.errors,
        curve: msp.curve,
    })
}

/// Trains and evaluates every (seed, α) pair. Each model trains on one
/// thread; pairs run in parallel. Results come back ordered by seed then α.
pub fn run_models(cfg: &ReproConfig) -> Result<Vec<ModelResult>> {
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_count() {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| {
        let data = cfg
            .seeds
            .par_iter()
            .map(|s| seed_data(cfg, *s))
            .collect::<Result<Vec<_>>>()?;
        let jobs: Vec<(&SeedData, f64)> = data
            .iter()
            .flat_map(|d| cfg.alphas.iter().map(move |a| (d, *a)))
            .collect();
        jobs.par_iter()
            .map(|(d, a)| run_model(cfg, d, *a))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionVerdict {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub criteria: Vec<CriterionVerdict>,
    pub seeds: usize,
    pub low_confidence: bool,
    pub advisory: bool,
}

impl Verdict {
    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    /// One header line with run flags, then one line per criterion.
    pub fn render(&self) -> String {
        let mut out = format!(
            "# seeds={} low_confidence={} advisory={}\n",
            self.seeds, self.low_confidence, self.advisory
        );
        for c in &self.criteria {
            out.push_str(&format!(
                "criterion={} name={} result={} {}\n",
                c.id,
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.detail
            ));
        }
        out
    }
}

/// Per-seed view of the results, α ascending.
struct SeedView<'a> {
    models: Vec<&'a ModelResult>,
}

impl SeedView<'_> {
    fn ce(&self) -> &ModelResult {
        self.models[0]
    }

    fn smoothed(&self) -> impl Iterator<Item = &ModelResult> + '_ {
        self.models.iter().copied().filter(|m| m.alpha > 0.0)
    }
}

fn group_by_seed(results: &[ModelResult]) -> Result<Vec<SeedView<'_>>> {
    let mut seeds: Vec<u64> = results.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    seeds
        .into_iter()
        .map(|s| {
            let mut models: Vec<&ModelResult> = results.iter().filter(|r| r.seed == s).collect();
            models.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
            if models.first().map(|m| m.alpha) != Some(0.0) || models.len() < 2 {
                return Err(Error::invalid(format!(
                    "seed {s} needs a CE model and at least one smoothed model"
                )));
            }
            Ok(SeedView { models })
        })
        .collect()
}

/// At least 4 of every 5 seeds.
fn most(k: usize, n: usize) -> bool {
    5 * k >= 4 * n
}

fn majority(k: usize, n: usize) -> bool {
    2 * k > n
}

fn check_aurc_order(seeds: &[SeedView], risk_factor: f64) -> CriterionVerdict {
    let alphas: Vec<f64> = seeds[0].models.iter().map(|m| m.alpha).collect();
    let means: Vec<f64> = (0..alphas.len())
        .map(|i| seeds.iter().map(|s| s.models[i].aurc_msp).sum::<f64>() / seeds.len() as f64)
        .collect();
    let ordered = means.windows(2).all(|w| w[0] < w[1]);
    let cov_wins = seeds
        .iter()
        .filter(|s| {
            let target = risk_factor * s.ce().error_rate;
            let ce = coverage_at_risk(&s.ce().curve, target);
            s.smoothed()
                .all(|m| ce > coverage_at_risk(&m.curve, target))
        })
        .count();
    let mean_txt: Vec<String> = alphas
        .iter()
        .zip(&means)
        .map(|(a, m)| format!("{a}:{m:.6}"))
        .collect();
    CriterionVerdict {
        id: 6,
        name: "msp_aurc_order",
        passed: ordered && most(cov_wins, seeds.len()),
        detail: format!(
            "mean_aurc={} ordered={} coverage_wins={}/{}",
            mean_txt.join(";"),
            ordered,
            cov_wins,
            seeds.len()
        ),
    }
}

fn check_vmax_separation(seeds: &[SeedView]) -> CriterionVerdict {
    let ok = seeds
        .iter()
        .filter(|s| {
            let ls_ok = s
                .smoothed()
                .filter(|m| m.alpha >= 0.2)
                .all(|m| m.separation.centers > 0 && m.separation.incorrect_above >= 0.7);
            let ce = &s.ce().separation;
            ls_ok && ce.centers > 0 && ce.overlap >= 0.7
        })
        .count();
    CriterionVerdict {
        id: 7,
        name: "vmax_separation",
        passed: majority(ok, seeds.len()),
        detail: format!("seeds_passing={}/{}", ok, seeds.len()),
    }
}

fn check_norm_gain(seeds: &[SeedView]) -> CriterionVerdict {
    let ok = seeds
        .iter()
        .filter(|s| {
            let ce_change = (s.ce().aurc_norm - s.ce().aurc_msp).abs();
            s.smoothed().all(|m| {
                let gain = m.aurc_msp - m.aurc_norm;
                gain > 0.0 && ce_change < gain
            })
        })
        .count();
    CriterionVerdict {
        id: 8,
        name: "logit_norm_gain",
        passed: most(ok, seeds.len()),
        detail: format!("seeds_passing={}/{}", ok, seeds.len()),
    }
}

fn check_shift_errors(seeds: &[SeedView]) -> CriterionVerdict {
    let ok = seeds
        .iter()
        .filter(|s| {
            let inversions = s
                .models
                .windows(2)
                .filter(|w| w[1].shift_errors < w[0].shift_errors)
                .count();
            inversions <= 1
        })
        .count();
    CriterionVerdict {
        id: 9,
        name: "shift_error_order",
        passed: most(ok, seeds.len()),
        detail: format!("seeds_passing={}/{}", ok, seeds.len()),
    }
}

/// Judges the directional criteria on a complete result grid.
pub fn verdicts(cfg: &ReproConfig, results: &[ModelResult]) -> Result<Verdict> {
    let seeds = group_by_seed(results)?;
    if seeds.is_empty() {
        return Err(Error::invalid("no model results"));
    }
    let n = seeds[0].models.len();
    if seeds.iter().any(|s| s.models.len() != n) {
        return Err(Error::invalid("every seed must cover the same alphas"));
    }
    Ok(Verdict {
        criteria: vec![
            check_aurc_order(&seeds, cfg.risk_factor),
            check_vmax_separation(&seeds),
            check_norm_gain(&seeds),
            check_shift_errors(&seeds),
        ],
        seeds: seeds.len(),
        low_confidence: seeds.len() < 5,
        advisory: cfg.quick,
    })
}

/// Per-model summary table.
pub fn results_table(
    cfg: &ReproConfig,
    results: &[ModelResult],
    precision: usize,
) -> Result<String> {
    let seeds = group_by_seed(results)?;
    let mut out = String::from(
        "seed,alpha,error_rate,aurc_msp,aurc_norm,p_best,coverage_at_risk,\
         vmax_incorrect_above,vmax_overlap,shift_accepted,shift_errors\n",
    );
    for s in &seeds {
        let target = cfg.risk_factor * s.ce().error_rate;
        for m in &s.models {
            out.push_str(&format!(
                "{},{},{:.p$},{:.p$},{:.p$},{},{:.p$},{:.p$},{:.p$},{},{}\n",
                m.seed,
                m.alpha,
                m.error_rate,
                m.aurc_msp,
                m.aurc_norm,
                m.p_best,
                coverage_at_risk(&m.curve, target),
                m.separation.incorrect_above,
                m.separation.overlap,
                m.shift_accepted,
                m.shift_errors,
                p = precision
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selective::{rc_curve, ScoredPrediction};

    fn curve(errors_at: &[usize], n: usize) -> RcCurve {
        let preds: Vec<_> = (0..n)
            .map(|i| ScoredPrediction::new(i as u64, i as f64, !errors_at.contains(&i)))
            .collect();
        rc_curve(&preds).unwrap()
    }

    fn result(seed: u64, alpha: f64, aurc: f64, shift_errors: usize) -> ModelResult {
        ModelResult {
            seed,
            alpha,
            final_loss: 0.0,
            error_rate: 0.2,
            aurc_msp: aurc,
            aurc_norm: if alpha > 0.0 {
                aurc - 0.01
            } else {
                aurc + 0.001
            },
            p_best: 2.0,
            separation: VmaxSeparation {
                centers: 10,
                incorrect_above: if alpha > 0.0 { 0.9 } else { 0.5 },
                overlap: if alpha > 0.0 { 0.1 } else { 1.0 },
            },
            shift_accepted: 100,
            shift_errors,
            id_errors: 0,
            // CE errors last, LS errors early in the ranking.
            curve: if alpha > 0.0 {
                curve(&[0, 9], 10)
            } else {
                curve(&[8, 9], 10)
            },
        }
    }

    fn grid(seeds: u64) -> Vec<ModelResult> {
        (0..seeds)
            .flat_map(|s| {
                DEFAULT_ALPHAS
                    .iter()
                    .enumerate()
                    .map(move |(i, a)| result(s, *a, 0.01 * (i + 1) as f64, 10 * i))
            })
            .collect()
    }

    #[test]
    fn all_pass_on_textbook_grid() {
        let v = verdicts(&ReproConfig::default(), &grid(5)).unwrap();
        assert!(v.all_passed(), "{}", v.render());
        assert!(!v.low_confidence);
        assert_eq!(v.criteria.len(), 4);
        assert_eq!(v.render().lines().count(), 5);
    }

    #[test]
    fn single_seed_is_low_confidence() {
        let v = verdicts(&ReproConfig::default(), &grid(1)).unwrap();
        assert!(v.low_confidence);
        assert!(v.render().starts_with("# seeds=1 low_confidence=true"));
    }

    #[test]
    fn aurc_order_violation_fails_first_check() {
        let mut g = grid(5);
        for m in g.iter_mut().filter(|m| m.alpha == 0.3) {
            m.aurc_msp = 0.025;
            m.aurc_norm = 0.015;
        }
        let v = verdicts(&ReproConfig::default(), &g).unwrap();
        assert!(!v.criteria[0].passed);
        assert!(v.criteria[1..].iter().all(|c| c.passed), "{}", v.render());
    }

    #[test]
    fn two_shift_inversions_fail_a_seed() {
        let mut g = grid(5);
        for m in g.iter_mut().filter(|m| m.seed < 2) {
            m.shift_errors = [30, 20, 10, 0][(m.alpha * 10.0).round() as usize];
        }
        let v = verdicts(&ReproConfig::default(), &g).unwrap();
        assert!(!v.criteria[3].passed);
        assert!(v.criteria[3].detail.contains("3/5"));
    }

    #[test]
    fn one_inversion_is_tolerated() {
        let mut g = grid(5);
        for m in g.iter_mut() {
            m.shift_errors = [10, 30, 20, 40][(m.alpha * 10.0).round() as usize];
        }
        assert!(verdicts(&ReproConfig::default(), &g).unwrap().criteria[3].passed);
    }

    #[test]
    fn ce_norm_change_must_stay_below_ls_gain() {
        let mut g = grid(5);
        for m in g.iter_mut().filter(|m| m.alpha == 0.0 && m.seed < 2) {
            m.aurc_norm = m.aurc_msp + 0.02;
        }
        let v = verdicts(&ReproConfig::default(), &g).unwrap();
        assert!(!v.criteria[2].passed);
    }

    #[test]
    fn rejects_missing_baseline() {
        let g: Vec<_> = grid(2).into_iter().filter(|m| m.alpha > 0.0).collect();
        assert!(verdicts(&ReproConfig::default(), &g).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ReproConfig {
            alphas: vec![0.1, 0.2],
            ..ReproConfig::default()
        };
        assert!(c.validate().is_err());
        c.alphas = vec![0.0, 1.5];
        assert!(c.validate().is_err());
        assert!(ReproConfig::quick().validate().is_ok());
    }

    #[test]
    fn tiny_run_is_deterministic() {
        let cfg = ReproConfig {
            seeds: vec![3],
            alphas: vec![0.0, 0.2],
            n_train: 300,
            n_val: 100,
            n_eval: 200,
            n_shift: 200,
            train: TrainConfig {
                epochs: 2,
                hidden: vec![8],
                ..TrainConfig::default()
            },
            ..ReproConfig::default()
        };
        let a = run_models(&cfg).unwrap();
        let b = run_models(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!((a[0].seed, a[0].alpha, a[1].alpha), (3, 0.0, 0.2));
        let v = verdicts(&cfg, &a).unwrap();
        assert!(v.low_confidence);
        assert_eq!(v.criteria.len(), 4);
    }
}
