//! Conditional logit statistics used to diagnose label-smoothing models:
//!
//! * max logit given max softmax probability, split by correctness;
//! * normalised max logit given max logit, inside bins of similar MSP;
//! * per-rank profiles of sorted logits.
//!
//! Sliding windows are centred on a grid anchored at the smallest observed
//! value and stepping by `step`. Standard deviations are population
//! standard deviations.

use crate::data::LogitRecord;
use crate::error::{Error, Result};
use crate::selective::{AuxStats, ScoredPrediction};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl GroupStat {
    fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowRow {
    pub center: f64,
    pub all: Option<GroupStat>,
    pub correct: Option<GroupStat>,
    pub incorrect: Option<GroupStat>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub window: f64,
    pub step: f64,
    pub min_count: usize,
}

impl WindowConfig {
    /// Step of `window / 5` and a minimum support of 10 samples.
    pub fn new(window: f64) -> Self {
        Self {
            window,
            step: window / 5.0,
            min_count: 10,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.window.is_finite() && self.window > 0.0) {
            return Err(Error::invalid(format!(
                "window must be > 0, got {}",
                self.window
            )));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::invalid(format!(
                "step must be > 0, got {}",
                self.step
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedStats {
    pub config: WindowConfig,
    pub rows: Vec<WindowRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    All,
    Correct,
    Incorrect,
}

impl WindowRow {
    pub fn group(&self, g: Group) -> Option<&GroupStat> {
        match g {
            Group::All => self.all.as_ref(),
            Group::Correct => self.correct.as_ref(),
            Group::Incorrect => self.incorrect.as_ref(),
        }
    }
}

impl WindowedStats {
    /// Least-squares slope of the group's window means against the centres;
    /// `None` with fewer than two populated rows.
    pub fn slope(&self, g: Group) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter_map(|r| r.group(g).map(|s| (r.center, s.mean)))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        (sxx > 0.0).then(|| sxy / sxx)
    }
}

struct Point {
    x: f64,
    y: f64,
    correct: bool,
}

fn windowed(mut pts: Vec<Point>, cfg: &WindowConfig) -> WindowedStats {
    let mut rows = Vec::new();
    if pts.is_empty() {
        return WindowedStats { config: *cfg, rows };
    }
    pts.sort_by(|a, b| a.x.total_cmp(&b.x));
    let lo = pts[0].x;
    let hi = pts[pts.len() - 1].x;
    let half = cfg.window / 2.0;
    let eps = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
    let keep = |v: Vec<f64>| GroupStat::from_values(&v).filter(|s| s.count >= cfg.min_count);

    let mut i = 0usize;
    loop {
        let center = lo + i as f64 * cfg.step;
        if center > hi + eps {
            break;
        }
        let start = pts.partition_point(|p| p.x < center - half - eps);
        let end = pts.partition_point(|p| p.x <= center + half + eps);
        let slice = &pts[start..end];
        let all = keep(slice.iter().map(|p| p.y).collect());
        let correct = keep(slice.iter().filter(|p| p.correct).map(|p| p.y).collect());
        let incorrect = keep(slice.iter().filter(|p| !p.correct).map(|p| p.y).collect());
        if all.is_some() || correct.is_some() || incorrect.is_some() {
            rows.push(WindowRow {
                center,
                all,
                correct,
                incorrect,
            });
        }
        i += 1;
    }
    WindowedStats { config: *cfg, rows }
}

fn aux_of(p: &ScoredPrediction) -> Result<AuxStats> {
    p.aux.ok_or_else(|| {
        Error::invalid(format!(
            "sample {} has no auxiliary logit statistics",
            p.sample_id
        ))
    })
}

/// Mean and std of `v_max` in sliding windows over `π_max`, separately for
/// correct and incorrect predictions.
pub fn conditional_vmax_stats(
    preds: &[ScoredPrediction],
    cfg: &WindowConfig,
) -> Result<WindowedStats> {
    cfg.validate()?;
    let pts = preds
        .iter()
        .map(|p| {
            let a = aux_of(p)?;
            Ok(Point {
                x: a.pi_max,
                y: a.v_max,
                correct: p.correct,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(windowed(pts, cfg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinStats {
    pub lo: f64,
    pub hi: f64,
    pub members: usize,
    /// Members whose `v_max` survived the clipping.
    pub kept: usize,
    pub v_max_mean: f64,
    pub v_max_std: f64,
    pub stats: WindowedStats,
}

/// Within each `π_max` bin `[lo, hi)` (the top bin includes `hi = 1`),
/// drops samples whose `v_max` is further than `clip_sigmas` standard
/// deviations from the bin mean and reports `v'_max` in sliding windows over
/// `v_max`.
pub fn conditional_vprime_stats(
    preds: &[ScoredPrediction],
    bins: &[(f64, f64)],
    cfg: &WindowConfig,
    clip_sigmas: f64,
) -> Result<Vec<BinStats>> {
    cfg.validate()?;
    if !(clip_sigmas >= 0.0) {
        return Err(Error::invalid(format!(
            "clip_sigmas must be >= 0, got {clip_sigmas}"
        )));
    }
    let aux = preds
        .iter()
        .map(|p| Ok((aux_of(p)?, p.correct)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(bins.len());
    for &(lo, hi) in bins {
        if !(lo < hi) {
            return Err(Error::invalid(format!("empty MSP bin [{lo}, {hi})")));
        }
        let members: Vec<&(AuxStats, bool)> = aux
            .iter()
            .filter(|(a, _)| a.pi_max >= lo && (a.pi_max < hi || (hi >= 1.0 && a.pi_max <= hi)))
            .collect();
        let vmax: Vec<f64> = members.iter().map(|(a, _)| a.v_max).collect();
        let (mean, std) =
            GroupStat::from_values(&vmax).map_or((f64::NAN, f64::NAN), |s| (s.mean, s.std));
        let limit = clip_sigmas * std;
        let pts: Vec<Point> = members
            .iter()
            .filter(|(a, _)| (a.v_max - mean).abs() <= limit)
            .map(|(a, c)| Point {
                x: a.v_max,
                y: a.v_prime_max,
                correct: *c,
            })
            .collect();
        let kept = pts.len();
        out.push(BinStats {
            lo,
            hi,
            members: members.len(),
            kept,
            v_max_mean: mean,
            v_max_std: std,
            stats: windowed(pts, cfg),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankProfile {
    /// 1-based rank, 1 being the largest logit.
    pub rank: usize,
    pub raw: MeanStd,
    pub power: MeanStd,
    pub exp: MeanStd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SortedProfile {
    pub p: f64,
    pub ranks: Vec<RankProfile>,
}

impl SortedProfile {
    /// Share of the summed mean exponentiated logits held by rank 1.
    pub fn top_exp_share(&self) -> f64 {
        let total: f64 = self.ranks.iter().map(|r| r.exp.mean).sum();
        self.ranks.first().map_or(0.0, |r| r.exp.mean / total)
    }
}

/// Sign-preserving power `sign(v)·|v|^p`.
pub fn signed_pow(v: f64, p: f64) -> f64 {
    v.signum() * v.abs().powf(p)
}

/// Per-rank mean and std of sorted logits, their signed `p`-th power and
/// their exponentials.
pub fn sorted_logit_profile(records: &[LogitRecord], p: f64) -> Result<SortedProfile> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("sorted-logit profile of an empty set"))?;
    let k = first.logits.num_classes();
    let mut columns = vec![Vec::with_capacity(records.len()); k];
    for (i, r) in records.iter().enumerate() {
        if r.logits.num_classes() != k {
            return Err(Error::invalid(format!(
                "record {i} has {} logits, expected {k}",
                r.logits.num_classes()
            )));
        }
        let mut v = r.logits.as_slice().to_vec();
        v.sort_by(|a, b| b.total_cmp(a));
        for (col, x) in columns.iter_mut().zip(v) {
            col.push(x);
        }
    }
    let ms = |vals: Vec<f64>| {
        let s = GroupStat::from_values(&vals).expect("non-empty");
        MeanStd {
            mean: s.mean,
            std: s.std,
        }
    };
    let ranks = columns
        .into_iter()
        .enumerate()
        .map(|(i, col)| RankProfile {
            rank: i + 1,
            power: ms(col.iter().map(|v| signed_pow(*v, p)).collect()),
            exp: ms(col.iter().map(|v| v.exp()).collect()),
            raw: ms(col),
        })
        .collect();
    Ok(SortedProfile { p, ranks })
}

/// How the correct and incorrect `v_max` curves relate across the windows
/// where both groups have support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VmaxSeparation {
    pub centers: usize,
    /// Fraction of centres where the incorrect mean exceeds the correct mean.
    pub incorrect_above: f64,
    /// Fraction of centres where the means differ by less than one pooled std.
    pub overlap: f64,
}

pub fn vmax_separation(stats: &WindowedStats) -> VmaxSeparation {
    let mut centers = 0usize;
    let mut above = 0usize;
    let mut overlap = 0usize;
    for row in &stats.rows {
        let (Some(c), Some(w)) = (&row.correct, &row.incorrect) else {
            continue;
        };
        centers += 1;
        if w.mean > c.mean {
            above += 1;
        }
        let n = (c.count + w.count) as f64;
        let pooled = ((c.count as f64 * c.std * c.std + w.count as f64 * w.std * w.std) / n).sqrt();
        if (w.mean - c.mean).abs() < pooled {
            overlap += 1;
        }
    }
    let frac = |x: usize| {
        if centers == 0 {
            0.0
        } else {
            x as f64 / centers as f64
        }
    };
    VmaxSeparation {
        centers,
        incorrect_above: frac(above),
        overlap: frac(overlap),
    }
}
