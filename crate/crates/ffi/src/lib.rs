//! C ABI over the `screject` crate.
//!
//! Every fallible function returns a [`ScrStatus`]. On failure the message
//! is kept per thread and can be read with [`scr_last_error_message`].
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`/
//! `*_train` functions and released by the matching `*_free`. Panics never
//! unwind into the caller; they are reported as [`ScrStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use screject::data::{load_logit_records, sample_dataset, LogitRecord, MixtureSpec};
use screject::losses::{grad_ls_logits, loss_ls, SmoothingConfig, TargetDistribution};
use screject::normalization::{score_maxlogit_norm, NormConfig, ShiftMode, DEFAULT_P_GRID};
use screject::scores::{softmax, LogitVector, ProbVector, ScoreKind};
use screject::selective::{
    aurc, coverage_at_risk, rc_curve, risk_at_coverage, RcCurve, ScoredPrediction,
};
use screject::trainer::{train_on, MlpModel, TrainConfig};
use screject::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScrStatus {
    Ok = 0,
    InvalidArgument = 1,
    InvalidConfig = 2,
    Degenerate = 3,
    Parse = 4,
    Format = 5,
    Diverged = 6,
    Io = 7,
    NullPointer = 8,
    OutOfRange = 9,
    Panic = 10,
}

pub const SCR_SCORE_MSP: u32 = 0;
pub const SCR_SCORE_ENTROPY: u32 = 1;
pub const SCR_SCORE_DOCTOR: u32 = 2;
pub const SCR_SCORE_ENERGY: u32 = 3;

pub const SCR_SHIFT_MEAN: u32 = 0;
pub const SCR_SHIFT_NONE: u32 = 1;

/// Risk-coverage curve.
pub struct ScrRcCurve {
    inner: RcCurve,
}

/// Parsed logit-record file.
pub struct ScrLogitFile {
    num_classes: usize,
    records: Vec<LogitRecord>,
}

/// Trained classifier.
pub struct ScrModel {
    inner: MlpModel,
}

/// Training settings. `hidden_layers` layers of `hidden_width` units.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScrTrainConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: ScrStatus,
    msg: String,
}

impl Failure {
    fn new(status: ScrStatus, msg: impl Into<String>) -> Self {
        Self {
            status,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidInput(_) => ScrStatus::InvalidArgument,
            Error::InvalidConfig(_) => ScrStatus::InvalidConfig,
            Error::Degenerate(_) => ScrStatus::Degenerate,
            Error::Parse { .. } => ScrStatus::Parse,
            Error::Format(_) => ScrStatus::Format,
            Error::Diverged { .. } => ScrStatus::Diverged,
            Error::Io { .. } => ScrStatus::Io,
        };
        Failure::new(status, e.to_string())
    }
}

type FfiResult<T = ()> = Result<T, Failure>;

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult) -> ScrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScrStatus::Ok,
        Ok(Err(fail)) => {
            set_last_error(&fail.msg);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            ScrStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> FfiResult {
    if p.is_null() {
        Err(Failure::new(
            ScrStatus::NullPointer,
            format!("{name} is null"),
        ))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must point to `n` readable values when `n > 0`.
unsafe fn input<'a, T>(p: *const T, n: usize, name: &str) -> FfiResult<&'a [T]> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must point to `n` writable values when `n > 0`.
unsafe fn output<'a, T>(p: *mut T, n: usize, name: &str) -> FfiResult<&'a mut [T]> {
    if n == 0 {
        return Ok(&mut []);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts_mut(p, n))
}

/// # Safety
/// `out` must be null or valid for one write.
unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> FfiResult {
    non_null(out, name)?;
    out.write(value);
    Ok(())
}

/// # Safety
/// `h` must be null or a live handle of type `T`.
unsafe fn handle<'a, T>(h: *const T, name: &str) -> FfiResult<&'a T> {
    non_null(h, name)?;
    Ok(&*h)
}

fn score_kind(kind: u32) -> FfiResult<ScoreKind> {
    match kind {
        SCR_SCORE_MSP => Ok(ScoreKind::Msp),
        SCR_SCORE_ENTROPY => Ok(ScoreKind::Entropy),
        SCR_SCORE_DOCTOR => Ok(ScoreKind::Doctor),
        SCR_SCORE_ENERGY => Ok(ScoreKind::Energy),
        other => Err(Failure::new(
            ScrStatus::InvalidArgument,
            format!("unknown score kind {other}"),
        )),
    }
}

fn shift_mode(mode: u32) -> FfiResult<ShiftMode> {
    match mode {
        SCR_SHIFT_MEAN => Ok(ShiftMode::MeanCentralise),
        SCR_SHIFT_NONE => Ok(ShiftMode::None),
        other => Err(Failure::new(
            ScrStatus::InvalidArgument,
            format!("unknown shift mode {other}"),
        )),
    }
}

fn into_handle<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// # Safety
/// `h` must be null or a handle from `into_handle` not yet freed.
unsafe fn free_handle<T>(h: *mut T) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn scr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn scr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Softmax of `k` logits into `out_probs`.
///
/// # Safety
/// `logits` and `out_probs` must each hold `k` values.
#[no_mangle]
pub unsafe extern "C" fn scr_softmax(
    logits: *const f64,
    k: usize,
    out_probs: *mut f64,
) -> ScrStatus {
    guard(|| {
        let v = LogitVector::new(input(logits, k, "logits")?.to_vec())?;
        let out = output(out_probs, k, "out_probs")?;
        out.copy_from_slice(softmax(&v).as_slice());
        Ok(())
    })
}

/// Uncertainty of `k` logits under a softmax score (`SCR_SCORE_*`); higher
/// means less certain.
///
/// # Safety
/// `logits` must hold `k` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scr_score(
    kind: u32,
    logits: *const f64,
    k: usize,
    out: *mut f64,
) -> ScrStatus {
    guard(|| {
        let kind = score_kind(kind)?;
        let v = LogitVector::new(input(logits, k, "logits")?.to_vec())?;
        let u = kind.softmax_score(&v).expect("softmax score kinds only");
        write_out(out, u, "out")
    })
}

/// Negative max entry of the shifted, `p`-normalised logits.
///
/// # Safety
/// `logits` must hold `k` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scr_maxlogit_norm(
    logits: *const f64,
    k: usize,
    p: f64,
    shift: u32,
    out: *mut f64,
) -> ScrStatus {
    guard(|| {
        let cfg = NormConfig::new(p, shift_mode(shift)?, DEFAULT_P_GRID.to_vec())?;
        let v = LogitVector::new(input(logits, k, "logits")?.to_vec())?;
        write_out(out, score_maxlogit_norm(&v, &cfg)?, "out")
    })
}

fn smoothing_inputs(
    probs: &[f64],
    target: &[f64],
    alpha: f64,
) -> FfiResult<(ProbVector, TargetDistribution, SmoothingConfig)> {
    let k = probs.len();
    let cfg = SmoothingConfig::new(alpha, k)?;
    Ok((
        ProbVector::new(probs.to_vec())?,
        TargetDistribution::soft(target.to_vec())?,
        cfg,
    ))
}

/// Label-smoothing loss of predicted `probs` against `target`, both of
/// length `k`.
///
/// # Safety
/// `probs` and `target` must hold `k` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scr_loss_ls(
    probs: *const f64,
    target: *const f64,
    k: usize,
    alpha: f64,
    out: *mut f64,
) -> ScrStatus {
    guard(|| {
        let (p, t, cfg) = smoothing_inputs(
            input(probs, k, "probs")?,
            input(target, k, "target")?,
            alpha,
        )?;
        write_out(out, loss_ls(&p, &t, &cfg)?, "out")
    })
}

/// Gradient of the label-smoothing loss with respect to the logits.
///
/// # Safety
/// `probs`, `target` and `out_grad` must each hold `k` values.
#[no_mangle]
pub unsafe extern "C" fn scr_grad_ls_logits(
    probs: *const f64,
    target: *const f64,
    k: usize,
    alpha: f64,
    out_grad: *mut f64,
) -> ScrStatus {
    guard(|| {
        let (p, t, cfg) = smoothing_inputs(
            input(probs, k, "probs")?,
            input(target, k, "target")?,
            alpha,
        )?;
        let g = grad_ls_logits(&p, &t, &cfg)?;
        output(out_grad, k, "out_grad")?.copy_from_slice(&g);
        Ok(())
    })
}

/// Builds the risk-coverage curve of `n` predictions. `correct[i]` is
/// nonzero for a correct prediction.
///
/// # Safety
/// `uncertainty` and `correct` must hold `n` values; `out` must be writable.
/// Release the curve with [`scr_rc_curve_free`].
#[no_mangle]
pub unsafe extern "C" fn scr_rc_curve_new(
    uncertainty: *const f64,
    correct: *const u8,
    n: usize,
    out: *mut *mut ScrRcCurve,
) -> ScrStatus {
    guard(|| {
        non_null(out, "out")?;
        let u = input(uncertainty, n, "uncertainty")?;
        let c = input(correct, n, "correct")?;
        let preds: Vec<_> = u
            .iter()
            .zip(c)
            .enumerate()
            .map(|(i, (u, c))| ScoredPrediction::new(i as u64, *u, *c != 0))
            .collect();
        let curve = rc_curve(&preds)?;
        write_out(out, into_handle(ScrRcCurve { inner: curve }), "out")
    })
}

/// # Safety
/// `curve` must be null or a live curve handle.
#[no_mangle]
pub unsafe extern "C" fn scr_rc_curve_free(curve: *mut ScrRcCurve) {
    free_handle(curve)
}

/// Number of operating points (distinct thresholds).
///
/// # Safety
/// `curve` must be a live handle; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scr_rc_curve_len(
    curve: *const ScrRcCurve,
    out_len: *mut usize,
) -> ScrStatus {
    guard(|| {
        write_out(
            out_len,
            handle(curve, "curve")?.inner.points().len(),
            "out_len",
        )
    })
}

/// Coverage, risk and threshold of point `i`; any output may be null.
///
/// # Safety
/// `curve` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn scr_rc_curve_point(
    curve: *const ScrRcCurve,
    i: usize,
    out_coverage: *mut f64,
    out_risk: *mut f64,
    out_threshold: *mut f64,
) -> ScrStatus {
    guard(|| {
        let c = handle(curve, "curve")?;
        let pt = c.inner.points().get(i).ok_or_else(|| {
            Failure::new(
                ScrStatus::OutOfRange,
                format!("point {i} of {}", c.inner.points().len()),
            )
        })?;
        for (p, v) in [
            (out_coverage, pt.coverage),
            (out_risk, pt.risk),
            (out_threshold, pt.threshold),
        ] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `curve` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scr_rc_curve_aurc(curve: *const ScrRcCurve, out: *mut f64) -> ScrStatus {
    guard(|| write_out(out, aurc(&handle(curve, "curve")?.inner), "out"))
}

/// Largest coverage whose selective risk is at most `target_risk`, or 0.
///
/// # Safety
/// `curve` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scr_rc_curve_coverage_at_risk(
    curve: *const ScrRcCurve,
    target_risk: f64,
    out: *mut f64,
) -> ScrStatus {
    guard(|| {
        write_out(
            out,
            coverage_at_risk(&handle(curve, "curve")?.inner, target_risk),
            "out",
        )
    })
}

/// Risk at the smallest operating point covering at least `target_coverage`.
///
/// # Safety
/// `curve` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scr_rc_curve_risk_at_coverage(
    curve: *const ScrRcCurve,
    target_coverage: f64,
    out: *mut f64,
) -> ScrStatus {
    guard(|| {
        let r = risk_at_coverage(&handle(curve, "curve")?.inner, target_coverage)?;
        write_out(out, r, "out")
    })
}

/// Loads a logit-record file.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
/// Release the handle with [`scr_logit_file_free`].
#[no_mangle]
pub unsafe extern "C" fn scr_logit_file_load(
    path: *const c_char,
    out: *mut *mut ScrLogitFile,
) -> ScrStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure::new(ScrStatus::InvalidArgument, "path is not UTF-8"))?;
        let file = load_logit_records(Path::new(path))?;
        write_out(
            out,
            into_handle(ScrLogitFile {
                num_classes: file.num_classes,
                records: file.records,
            }),
            "out",
        )
    })
}

/// # Safety
/// `file` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn scr_logit_file_free(file: *mut ScrLogitFile) {
    free_handle(file)
}

/// # Safety
/// `file` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn scr_logit_file_shape(
    file: *const ScrLogitFile,
    out_records: *mut usize,
    out_classes: *mut usize,
) -> ScrStatus {
    guard(|| {
        let f = handle(file, "file")?;
        write_out(out_records, f.records.len(), "out_records")?;
        write_out(out_classes, f.num_classes, "out_classes")
    })
}

/// Copies record `i`: its `k` logits and its label.
///
/// # Safety
/// `file` must be a live handle; `out_logits` must hold `k` values and
/// `out_label` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scr_logit_file_record(
    file: *const ScrLogitFile,
    i: usize,
    out_logits: *mut f64,
    k: usize,
    out_label: *mut usize,
) -> ScrStatus {
    guard(|| {
        let f = handle(file, "file")?;
        let r = f.records.get(i).ok_or_else(|| {
            Failure::new(
                ScrStatus::OutOfRange,
                format!("record {i} of {}", f.records.len()),
            )
        })?;
        if k != f.num_classes {
            return Err(Failure::new(
                ScrStatus::InvalidArgument,
                format!("buffer holds {k} logits, file has {}", f.num_classes),
            ));
        }
        output(out_logits, k, "out_logits")?.copy_from_slice(r.logits.as_slice());
        write_out(out_label, r.label, "out_label")
    })
}

/// RC curve of every record in `file` under a softmax score.
///
/// # Safety
/// `file` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scr_logit_file_rc_curve(
    file: *const ScrLogitFile,
    kind: u32,
    out: *mut *mut ScrRcCurve,
) -> ScrStatus {
    guard(|| {
        let f = handle(file, "file")?;
        let kind = score_kind(kind)?;
        non_null(out, "out")?;
        let preds: Vec<_> = f
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let u = kind
                    .softmax_score(&r.logits)
                    .expect("softmax score kinds only");
                ScoredPrediction::new(i as u64, u, r.is_correct())
            })
            .collect();
        let curve = rc_curve(&preds)?;
        write_out(out, into_handle(ScrRcCurve { inner: curve }), "out")
    })
}

/// Default training settings.
#[no_mangle]
pub extern "C" fn scr_train_config_default() -> ScrTrainConfig {
    let d = TrainConfig::default();
    ScrTrainConfig {
        alpha: d.alpha,
        epochs: d.epochs,
        batch_size: d.batch_size,
        learning_rate: d.learning_rate,
        momentum: d.momentum,
        weight_decay: d.weight_decay,
        seed: d.seed,
        hidden_width: d.hidden.first().copied().unwrap_or(0),
        hidden_layers: d.hidden.len(),
    }
}

/// Trains a classifier on `n_train` points drawn with `data_seed` from the
/// default eight-class mixture.
///
/// # Safety
/// `config` must be readable; `out` must be writable. Release the model
/// with [`scr_model_free`].
#[no_mangle]
pub unsafe extern "C" fn scr_model_train_desk(
    config: *const ScrTrainConfig,
    n_train: usize,
    data_seed: u64,
    out: *mut *mut ScrModel,
) -> ScrStatus {
    guard(|| {
        non_null(config, "config")?;
        non_null(out, "out")?;
        let c = *config;
        let tcfg = TrainConfig {
            alpha: c.alpha,
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            seed: c.seed,
            hidden: vec![c.hidden_width; c.hidden_layers],
        };
        if n_train == 0 {
            return Err(Failure::new(
                ScrStatus::InvalidArgument,
                "n_train must be positive",
            ));
        }
        let spec = MixtureSpec::desk_default(data_seed);
        let data = sample_dataset(&spec, n_train);
        let run = train_on(&data, spec.num_classes(), &tcfg)?;
        write_out(out, into_handle(ScrModel { inner: run.model }), "out")
    })
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn scr_model_free(model: *mut ScrModel) {
    free_handle(model)
}

/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn scr_model_shape(
    model: *const ScrModel,
    out_input_dim: *mut usize,
    out_classes: *mut usize,
) -> ScrStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        write_out(out_input_dim, m.input_dim(), "out_input_dim")?;
        write_out(out_classes, m.num_classes(), "out_classes")
    })
}

/// Logits of the model at point `x`.
///
/// # Safety
/// `model` must be a live handle; `x` must hold `dim` values and
/// `out_logits` `k` values.
#[no_mangle]
pub unsafe extern "C" fn scr_model_forward(
    model: *const ScrModel,
    x: *const f64,
    dim: usize,
    out_logits: *mut f64,
    k: usize,
) -> ScrStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        if k != m.num_classes() {
            return Err(Failure::new(
                ScrStatus::InvalidArgument,
                format!("buffer holds {k} logits, model has {}", m.num_classes()),
            ));
        }
        let v = m.forward(input(x, dim, "x")?)?;
        output(out_logits, k, "out_logits")?.copy_from_slice(v.as_slice());
        Ok(())
    })
}
