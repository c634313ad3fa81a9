use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::svg::{LineChart, Series};
use super::{
    AnalyzeArgs, CliError, CliResult, EvalArgs, ExperimentArgs, RcArgs, ReproArgs, TrainArgs,
};
use crate::analysis::{
    conditional_vmax_stats, conditional_vprime_stats, sorted_logit_profile, GroupStat,
    WindowConfig, WindowedStats,
};
use crate::data::{
    load_logit_records, LogitRecord, MixtureSpec, DESK_CLASSES, DESK_RADIUS, DESK_SIGMA,
};
use crate::evaluate::{evaluate, score_records, Scorer};
use crate::manifest::{model_label, training_manifest, Manifest, MANIFEST_FILE};
use crate::normalization::{NormConfig, DEFAULT_P_GRID};
use crate::repro::{model_config, results_table, run_models, seed_data, verdicts, ReproConfig};
use crate::scores::ScoreKind;
use crate::selective::{rc_curve, shift_mix_report, ScoredPrediction, SOURCE_SHIFT};
use crate::trainer::{dump_logits, train_on};
use crate::Error;

fn fmt(v: f64, precision: usize) -> String {
    format!("{v:.precision$}")
}

fn join_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

/// Loads a logit file, refusing empty ones.
fn read_records(path: &Path) -> CliResult<Vec<LogitRecord>> {
    let file = load_logit_records(path).map_err(|e| CliError::in_file(path, e))?;
    if file.records.is_empty() {
        return Err(CliError::Data {
            path: path.to_path_buf(),
            msg: "logit file has no records".into(),
        });
    }
    Ok(file.records)
}

/// Legend label from a `manifest.txt` next to the logit file, else the
/// file name.
fn legend_label(path: &Path) -> String {
    let stem = path.file_stem().map_or_else(
        || path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    path.parent()
        .map(|d| d.join(MANIFEST_FILE))
        .and_then(|m| Manifest::read(&m).ok())
        .and_then(|m| m.get("label").map(|l| format!("{l} ({stem})")))
        .unwrap_or(stem)
}

fn experiment_config(
    exp: &ExperimentArgs,
    alphas: Vec<f64>,
    seeds: Vec<u64>,
    quick: bool,
) -> CliResult<ReproConfig> {
    let mut cfg = if quick {
        ReproConfig::quick()
    } else {
        ReproConfig::default()
    };
    if exp.classes.is_some() || exp.radius.is_some() || exp.sigma.is_some() {
        cfg.spec = MixtureSpec::circle(
            exp.classes.unwrap_or(DESK_CLASSES),
            exp.radius.unwrap_or(DESK_RADIUS),
            exp.sigma.unwrap_or(DESK_SIGMA),
            0,
        )?;
    }
    cfg.seeds = seeds;
    cfg.alphas = alphas;
    let t = &mut cfg.train;
    macro_rules! apply {
        ($($src:ident => $dst:expr),* $(,)?) => {
            $(if let Some(v) = exp.$src.clone() { $dst = v; })*
        };
    }
    apply!(
        n_train => cfg.n_train,
        n_val => cfg.n_val,
        n_eval => cfg.n_eval,
        n_shift => cfg.n_shift,
        shift_sigmas => cfg.shift_sigmas,
        epochs => t.epochs,
        batch_size => t.batch_size,
        lr => t.learning_rate,
        momentum => t.momentum,
        weight_decay => t.weight_decay,
        hidden => t.hidden,
    );
    if cfg.alphas.is_empty() {
        return Err(CliError::Usage(
            "--alphas must list at least one value".into(),
        ));
    }
    for (i, a) in cfg.alphas.iter().enumerate() {
        model_config(&cfg, 0, *a).validate()?;
        if cfg.alphas[..i].contains(a) {
            return Err(CliError::Usage(format!("alpha {a} listed twice")));
        }
    }
    if [cfg.n_train, cfg.n_val, cfg.n_eval, cfg.n_shift].contains(&0) {
        return Err(CliError::Usage("dataset sizes must be positive".into()));
    }
    Ok(cfg)
}

fn experiment_manifest(cfg: &ReproConfig, m: &mut Manifest) {
    m.set("n_val", cfg.n_val)
        .set("n_eval", cfg.n_eval)
        .set("n_shift", cfg.n_shift)
        .set("shift_sigmas", cfg.shift_sigmas)
        .set("shift_delta", join_f64(&cfg.shift_delta()));
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let cfg = experiment_config(&a.exp, a.alphas.clone(), vec![a.seed], false)?;
    let data = seed_data(&cfg, a.seed)?;
    create_dir(&a.out)?;
    for &alpha in &cfg.alphas {
        let dir = a.out.join(format!("seed{}_alpha{}", a.seed, alpha));
        create_dir(&dir)?;
        let tcfg = model_config(&cfg, a.seed, alpha);
        let run = train_on(&data.train, cfg.spec.num_classes(), &tcfg)?;
        for (name, set, tag) in [
            ("train", &data.train, None),
            ("val", &data.val, None),
            ("eval", &data.eval, None),
            ("shift", &data.shift, Some(SOURCE_SHIFT)),
        ] {
            dump_logits(&run.model, set, tag, &dir.join(format!("{name}.logits")))?;
        }
        let mut m = training_manifest(&cfg.spec, &tcfg, cfg.n_train);
        m.set("command", "train").set("experiment_seed", a.seed);
        experiment_manifest(&cfg, &mut m);
        m.set(
            "final_train_loss",
            run.epoch_losses.last().copied().unwrap_or(f64::NAN),
        );
        m.write(&dir.join(MANIFEST_FILE))?;
        let _ = writeln!(out, "{}: {}", model_label(alpha), dir.display());
    }
    Ok(())
}

fn norm_config(
    p_grid: &[f64],
    shift_mode: crate::normalization::ShiftMode,
    p: f64,
) -> CliResult<NormConfig> {
    let mut grid = p_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    NormConfig::new(p, shift_mode, grid).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult {
    if a.score == ScoreKind::MaxLogitNorm && a.val.is_none() {
        return Err(CliError::Usage(
            "maxlogit-norm chooses p on validation data; pass --val".into(),
        ));
    }
    let p0 = a.norm.p_grid.first().copied().unwrap_or(2.0);
    let norm = norm_config(&a.norm.p_grid, a.norm.shift_mode, p0)?;
    let records = read_records(&a.logits)?;
    let val = a.val.as_deref().map(read_records).transpose()?;
    let m = evaluate(
        &records,
        val.as_deref(),
        a.score,
        &norm,
        &a.risks,
        &a.coverages,
    )
    .map_err(|e| match e {
        Error::Degenerate(_) => CliError::in_file(&a.logits, e),
        other => other.into(),
    })?;

    let p = a.precision;
    let mut table = String::from("metric,target,value\n");
    table.push_str(&format!("n,,{}\n", m.n));
    table.push_str(&format!("error_rate,,{}\n", fmt(m.error_rate, p)));
    table.push_str(&format!("aurc,,{}\n", fmt(m.aurc, p)));
    for (r, c) in &m.coverage_at_risk {
        table.push_str(&format!("coverage_at_risk,{},{}\n", fmt(*r, p), fmt(*c, p)));
    }
    for (c, r) in &m.risk_at_coverage {
        table.push_str(&format!("risk_at_coverage,{},{}\n", fmt(*c, p), fmt(*r, p)));
    }
    if let Some(s) = &m.p_search {
        table.push_str(&format!("p,,{}\n", s.p_best));
        table.push_str(&format!("val_aurc,,{}\n", fmt(s.aurc_best, p)));
    }
    out.write_all(table.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))?;

    if let Some(path) = &a.out {
        write_file(path, &table)?;
        let mut man = Manifest::new();
        man.set("command", "eval")
            .set("logits", a.logits.display())
            .set(
                "val",
                a.val
                    .as_ref()
                    .map_or(String::new(), |v| v.display().to_string()),
            )
            .set("score", a.score)
            .set("risks", join_f64(&a.risks))
            .set("coverages", join_f64(&a.coverages))
            .set("p_grid", join_f64(norm.p_grid()))
            .set("shift_mode", norm.shift_mode().name())
            .set("precision", p);
        man.write(&sibling(path, "manifest.txt"))?;
    }
    Ok(())
}

/// `dir/name.ext` → `dir/name.ext.suffix`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

/// Uncertainty scores without auxiliary statistics.
fn plain_scores(
    records: &[LogitRecord],
    kind: ScoreKind,
    norm: &NormConfig,
) -> crate::Result<Vec<ScoredPrediction>> {
    let scorer = match kind {
        ScoreKind::MaxLogitNorm => Scorer::MaxLogitNorm(norm.clone()),
        k => Scorer::Softmax(k),
    };
    score_records(records, &scorer, None)
}

pub fn cmd_rc(a: &RcArgs, out: &mut dyn Write) -> CliResult {
    if !a.label.is_empty() && a.label.len() != a.logits.len() {
        return Err(CliError::Usage(format!(
            "{} labels for {} logit files",
            a.label.len(),
            a.logits.len()
        )));
    }
    let norm = norm_config(&DEFAULT_P_GRID, a.shift_mode, a.p)?;
    let inputs = a
        .logits
        .iter()
        .map(|path| {
            let records = read_records(path)?;
            let preds =
                plain_scores(&records, a.score, &norm).map_err(|e| CliError::in_file(path, e))?;
            Ok((
                path,
                rc_curve(&preds).map_err(|e| CliError::in_file(path, e))?,
            ))
        })
        .collect::<CliResult<Vec<_>>>()?;

    create_dir(&a.out_dir)?;
    let p = a.precision;
    let mut man = Manifest::new();
    man.set("command", "rc")
        .set("score", a.score)
        .set("p", a.p)
        .set("shift_mode", a.shift_mode.name())
        .set("log_coverage", a.log_coverage)
        .set("precision", p);
    let mut series = Vec::with_capacity(inputs.len());
    for (i, (path, curve)) in inputs.iter().enumerate() {
        let mut table = String::from("coverage,risk,threshold\n");
        for pt in curve.points() {
            table.push_str(&format!(
                "{},{},{}\n",
                fmt(pt.coverage, p),
                fmt(pt.risk, p),
                fmt(pt.threshold, p)
            ));
        }
        let name = format!("rc_{i}.csv");
        write_file(&a.out_dir.join(&name), &table)?;
        let label = a
            .label
            .get(i)
            .cloned()
            .unwrap_or_else(|| legend_label(path));
        man.set(format!("input_{i}"), path.display())
            .set(format!("label_{i}"), &label)
            .set(format!("table_{i}"), &name);
        let _ = writeln!(out, "{name}: {label} ({} points)", curve.points().len());
        series.push(Series {
            label,
            points: curve
                .points()
                .iter()
                .map(|pt| (pt.coverage, 100.0 * pt.risk))
                .collect(),
        });
    }
    let chart = LineChart {
        title: format!("Risk-coverage ({})", a.score),
        x_label: if a.log_coverage {
            "coverage (log)"
        } else {
            "coverage"
        }
        .into(),
        y_label: "selective risk (%)".into(),
        log_x: a.log_coverage,
        series,
    };
    write_file(&a.out_dir.join("rc.svg"), &chart.render(a.deterministic))?;
    man.write(&a.out_dir.join(MANIFEST_FILE))?;
    Ok(())
}

fn group_cells(g: Option<&GroupStat>, p: usize) -> String {
    match g {
        Some(s) => format!("{},{},{}", fmt(s.mean, p), fmt(s.std, p), s.count),
        None => ",,0".into(),
    }
}

fn window_rows(prefix: &str, stats: &WindowedStats, p: usize) -> String {
    stats
        .rows
        .iter()
        .map(|r| {
            format!(
                "{prefix}{},{},{},{}\n",
                fmt(r.center, p),
                group_cells(r.all.as_ref(), p),
                group_cells(r.correct.as_ref(), p),
                group_cells(r.incorrect.as_ref(), p)
            )
        })
        .collect()
}

const GROUP_HEADER: &str =
    "all_mean,all_std,all_count,correct_mean,correct_std,correct_count,incorrect_mean,incorrect_std,incorrect_count";

fn mean_series(label: String, stats: &WindowedStats, correct: bool) -> Series {
    Series {
        label,
        points: stats
            .rows
            .iter()
            .filter_map(|r| {
                let g = if correct { &r.correct } else { &r.incorrect };
                g.as_ref().map(|g| (r.center, g.mean))
            })
            .collect(),
    }
}

fn split_sources(records: &[LogitRecord]) -> (Vec<LogitRecord>, Vec<LogitRecord>) {
    records
        .iter()
        .cloned()
        .partition(|r| r.source_tag.as_deref() != Some(SOURCE_SHIFT))
}

pub fn cmd_analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> CliResult {
    let wcfg = WindowConfig {
        window: a.window,
        step: a.step.unwrap_or(a.window / 5.0),
        min_count: a.min_count,
    };
    if a.bins.len() < 2 || a.bins.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(CliError::Usage(
            "--bins needs at least two increasing edges".into(),
        ));
    }
    if let Some(c) = a.coverage {
        if !(c > 0.0 && c <= 1.0) {
            return Err(CliError::Usage(format!("--coverage {c} outside (0, 1]")));
        }
    }
    let norm = norm_config(&DEFAULT_P_GRID, a.shift_mode, a.p)?;
    let records = read_records(&a.logits)?;
    let preds = score_records(&records, &Scorer::Softmax(ScoreKind::Msp), Some(&norm))
        .map_err(|e| CliError::in_file(&a.logits, e))?;
    let p = a.precision;

    let vmax = conditional_vmax_stats(&preds, &wcfg)?;
    let bins: Vec<(f64, f64)> = a.bins.windows(2).map(|w| (w[0], w[1])).collect();
    let vprime = conditional_vprime_stats(&preds, &bins, &wcfg, a.clip_sigmas)?;
    let profile = sorted_logit_profile(&records, a.p)?;

    create_dir(&a.out_dir)?;
    write_file(
        &a.out_dir.join("vmax.csv"),
        &format!(
            "pi_max_center,{GROUP_HEADER}\n{}",
            window_rows("", &vmax, p)
        ),
    )?;
    let vmax_chart = LineChart {
        title: "max logit given max softmax probability".into(),
        x_label: "max softmax probability".into(),
        y_label: "mean max logit".into(),
        log_x: false,
        series: vec![
            mean_series("correct".into(), &vmax, true),
            mean_series("incorrect".into(), &vmax, false),
        ],
    };
    write_file(
        &a.out_dir.join("vmax.svg"),
        &vmax_chart.render(a.deterministic),
    )?;

    let mut vp_table = format!("bin_lo,bin_hi,members,kept,v_max_center,{GROUP_HEADER}\n");
    let mut vp_series = Vec::new();
    for b in &vprime {
        let prefix = format!(
            "{},{},{},{},",
            fmt(b.lo, p),
            fmt(b.hi, p),
            b.members,
            b.kept
        );
        vp_table.push_str(&window_rows(&prefix, &b.stats, p));
        for correct in [true, false] {
            let which = if correct { "correct" } else { "incorrect" };
            vp_series.push(mean_series(
                format!("[{}, {}) {which}", b.lo, b.hi),
                &b.stats,
                correct,
            ));
        }
    }
    write_file(&a.out_dir.join("vprime.csv"), &vp_table)?;
    let vp_chart = LineChart {
        title: format!("normalised max logit (p={}) given max logit", a.p),
        x_label: "max logit".into(),
        y_label: "mean normalised max logit".into(),
        log_x: false,
        series: vp_series,
    };
    write_file(
        &a.out_dir.join("vprime.svg"),
        &vp_chart.render(a.deterministic),
    )?;

    let mut prof = String::from("rank,raw_mean,raw_std,pow_mean,pow_std,exp_mean,exp_std\n");
    for r in &profile.ranks {
        prof.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.rank,
            fmt(r.raw.mean, p),
            fmt(r.raw.std, p),
            fmt(r.power.mean, p),
            fmt(r.power.std, p),
            fmt(r.exp.mean, p),
            fmt(r.exp.std, p)
        ));
    }
    write_file(&a.out_dir.join("profile.csv"), &prof)?;

    let mut man = Manifest::new();
    man.set("command", "analyze")
        .set("logits", a.logits.display())
        .set("window", a.window)
        .set("step", wcfg.step)
        .set("min_count", a.min_count)
        .set("p", a.p)
        .set("shift_mode", a.shift_mode.name())
        .set("bins", join_f64(&a.bins))
        .set("clip_sigmas", a.clip_sigmas)
        .set("precision", p);

    if let Some(coverage) = a.coverage {
        let mut pooled = records.clone();
        for path in &a.shift {
            pooled.extend(read_records(path)?);
        }
        let (id, shifted) = split_sources(&pooled);
        let msp = |r: &[LogitRecord]| plain_scores(r, ScoreKind::Msp, &norm);
        let report = shift_mix_report(&msp(&id)?, &msp(&shifted)?, coverage)
            .map_err(|e| CliError::in_file(&a.logits, e))?;
        let mut t = String::from("source,samples,errors,error_rate\n");
        for s in [&report.in_distribution, &report.shifted] {
            t.push_str(&format!(
                "{},{},{},{}\n",
                s.source,
                s.count,
                s.errors,
                fmt(s.error_rate, p)
            ));
        }
        let errors = report.in_distribution.errors + report.shifted.errors;
        let rate = if report.accepted == 0 {
            0.0
        } else {
            errors as f64 / report.accepted as f64
        };
        t.push_str(&format!(
            "total,{},{},{}\n",
            report.accepted,
            errors,
            fmt(rate, p)
        ));
        write_file(&a.out_dir.join("shift_mix.csv"), &t)?;
        man.set("coverage", coverage).set(
            "shift_inputs",
            a.shift
                .iter()
                .map(|s| s.display().to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
    }
    man.write(&a.out_dir.join(MANIFEST_FILE))?;
    let _ = write!(out, "{}", man.render());
    Ok(())
}

pub fn cmd_repro(a: &ReproArgs, out: &mut dyn Write) -> CliResult {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let cfg = experiment_config(&a.exp, a.alphas.clone(), (0..a.seeds).collect(), a.quick)?;
    cfg.validate()?;
    let results = run_models(&cfg)?;
    let verdict = verdicts(&cfg, &results)?;

    create_dir(&a.out_dir)?;
    write_file(&a.out_dir.join("verdict.txt"), &verdict.render())?;
    write_file(
        &a.out_dir.join("results.csv"),
        &results_table(&cfg, &results, a.precision)?,
    )?;
    let mut man = training_manifest(&cfg.spec, &cfg.train, cfg.n_train);
    man.set("command", "repro")
        .set("label", "repro")
        .set("alpha", join_f64(&cfg.alphas))
        .set("seed", format!("0..{}", a.seeds))
        .set("quick", cfg.quick);
    experiment_manifest(&cfg, &mut man);
    man.set("window", cfg.window)
        .set("shift_coverage", cfg.shift_coverage)
        .set("risk_factor", cfg.risk_factor)
        .set("p_grid", join_f64(cfg.norm.p_grid()))
        .set("shift_mode", cfg.norm.shift_mode().name());
    man.write(&a.out_dir.join(MANIFEST_FILE))?;
    let _ = write!(out, "{}", verdict.render());

    if verdict.all_passed() || verdict.advisory {
        return Ok(());
    }
    let failed: Vec<String> = verdict
        .criteria
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.to_string())
        .collect();
    Err(CliError::CriteriaFailed(format!(
        "criteria failed: {}",
        failed.join(", ")
    )))
}
