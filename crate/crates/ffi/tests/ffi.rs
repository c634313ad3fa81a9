use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use screject::data::{write_logit_records, LogitRecord};
use screject::scores::LogitVector;
use screject_ffi::*;

fn last_error() -> String {
    let p = scr_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn golden_curve() -> *mut ScrRcCurve {
    let u = [0.1, 0.2, 0.3, 0.4];
    let c = [1u8, 1, 0, 1];
    let mut curve = ptr::null_mut();
    let s = unsafe { scr_rc_curve_new(u.as_ptr(), c.as_ptr(), 4, &mut curve) };
    assert_eq!(s, ScrStatus::Ok);
    assert!(!curve.is_null());
    curve
}

#[test]
fn golden_rc_metrics() {
    let curve = golden_curve();
    unsafe {
        let mut n = 0usize;
        assert_eq!(scr_rc_curve_len(curve, &mut n), ScrStatus::Ok);
        assert_eq!(n, 4);
        let mut a = 0.0;
        assert_eq!(scr_rc_curve_aurc(curve, &mut a), ScrStatus::Ok);
        assert!((a - 7.0 / 48.0).abs() < 1e-15);
        let mut cov = 0.0;
        assert_eq!(
            scr_rc_curve_coverage_at_risk(curve, 0.10, &mut cov),
            ScrStatus::Ok
        );
        assert_eq!(cov, 0.5);
        let mut risk = 0.0;
        assert_eq!(
            scr_rc_curve_risk_at_coverage(curve, 0.75, &mut risk),
            ScrStatus::Ok
        );
        assert!((risk - 1.0 / 3.0).abs() < 1e-15);
        let (mut c, mut r, mut t) = (0.0, 0.0, 0.0);
        assert_eq!(
            scr_rc_curve_point(curve, 3, &mut c, &mut r, &mut t),
            ScrStatus::Ok
        );
        assert_eq!((c, r, t), (1.0, 0.25, 0.4));
        assert_eq!(
            scr_rc_curve_point(curve, 0, ptr::null_mut(), &mut r, ptr::null_mut()),
            ScrStatus::Ok
        );
        assert_eq!(r, 0.0);
        assert_eq!(
            scr_rc_curve_point(curve, 4, &mut c, &mut r, &mut t),
            ScrStatus::OutOfRange
        );
        assert!(last_error().contains("point 4"));
        assert_eq!(
            scr_rc_curve_risk_at_coverage(curve, 1.5, &mut risk),
            ScrStatus::InvalidArgument
        );
        scr_rc_curve_free(curve);
    }
}

#[test]
fn null_pointers_are_reported_not_dereferenced() {
    unsafe {
        let mut out = 0.0;
        assert_eq!(
            scr_rc_curve_aurc(ptr::null(), &mut out),
            ScrStatus::NullPointer
        );
        assert!(last_error().contains("curve is null"));
        assert_eq!(
            scr_score(SCR_SCORE_MSP, ptr::null(), 3, &mut out),
            ScrStatus::NullPointer
        );
        let v = [1.0, 2.0];
        assert_eq!(
            scr_score(SCR_SCORE_MSP, v.as_ptr(), 2, ptr::null_mut()),
            ScrStatus::NullPointer
        );
        scr_rc_curve_free(ptr::null_mut());
        scr_logit_file_free(ptr::null_mut());
        scr_model_free(ptr::null_mut());
    }
}

#[test]
fn scores_and_softmax() {
    let v = [2.0, 1.0, 0.0];
    let mut p = [0.0; 3];
    unsafe {
        assert_eq!(scr_softmax(v.as_ptr(), 3, p.as_mut_ptr()), ScrStatus::Ok);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let mut u = 0.0;
        assert_eq!(
            scr_score(SCR_SCORE_MSP, v.as_ptr(), 3, &mut u),
            ScrStatus::Ok
        );
        assert_eq!(u, -p[0]);
        assert_eq!(
            scr_score(SCR_SCORE_ENERGY, v.as_ptr(), 3, &mut u),
            ScrStatus::Ok
        );
        let lse = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((u + lse).abs() < 1e-12);
        assert_eq!(
            scr_score(99, v.as_ptr(), 3, &mut u),
            ScrStatus::InvalidArgument
        );
        assert_eq!(
            scr_score(SCR_SCORE_MSP, v.as_ptr(), 1, &mut u),
            ScrStatus::InvalidArgument
        );

        let flat = [0.0, 0.0];
        assert_eq!(
            scr_maxlogit_norm(flat.as_ptr(), 2, 2.0, SCR_SHIFT_MEAN, &mut u),
            ScrStatus::Degenerate
        );
        let w = [3.0, 4.0];
        assert_eq!(
            scr_maxlogit_norm(w.as_ptr(), 2, 2.0, SCR_SHIFT_NONE, &mut u),
            ScrStatus::Ok
        );
        assert!((u + 0.8).abs() < 1e-15);
        assert_eq!(
            scr_maxlogit_norm(w.as_ptr(), 2, 0.5, SCR_SHIFT_NONE, &mut u),
            ScrStatus::InvalidConfig
        );
    }
}

#[test]
fn smoothing_loss_and_gradient() {
    let probs = [0.7, 0.2, 0.1];
    let target = [1.0, 0.0, 0.0];
    let mut g = [0.0; 3];
    unsafe {
        assert_eq!(
            scr_grad_ls_logits(probs.as_ptr(), target.as_ptr(), 3, 0.3, g.as_mut_ptr()),
            ScrStatus::Ok
        );
        let smoothed = [0.7 + 0.1, 0.1, 0.1];
        for k in 0..3 {
            assert!((g[k] - (probs[k] - smoothed[k])).abs() < 1e-15);
        }
        let mut l = 0.0;
        assert_eq!(
            scr_loss_ls(probs.as_ptr(), target.as_ptr(), 3, 0.0, &mut l),
            ScrStatus::Ok
        );
        assert!((l + 0.7f64.ln()).abs() < 1e-15);
        assert_eq!(
            scr_loss_ls(probs.as_ptr(), target.as_ptr(), 3, 1.5, &mut l),
            ScrStatus::InvalidConfig
        );
        let bad = [0.5, 0.2, 0.1];
        assert_eq!(
            scr_loss_ls(bad.as_ptr(), target.as_ptr(), 3, 0.1, &mut l),
            ScrStatus::InvalidArgument
        );
    }
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn logit_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.logits");
    let recs = vec![
        LogitRecord::new(LogitVector::new(vec![4.0, 0.0, 1.0]).unwrap(), 0, None).unwrap(),
        LogitRecord::new(LogitVector::new(vec![0.5, 2.0, -1.0]).unwrap(), 2, None).unwrap(),
    ];
    write_logit_records(&path, 3, &recs).unwrap();
    unsafe {
        let mut f = ptr::null_mut();
        assert_eq!(
            scr_logit_file_load(cpath(&path).as_ptr(), &mut f),
            ScrStatus::Ok
        );
        let (mut n, mut k) = (0usize, 0usize);
        assert_eq!(scr_logit_file_shape(f, &mut n, &mut k), ScrStatus::Ok);
        assert_eq!((n, k), (2, 3));
        let mut buf = [0.0; 3];
        let mut label = 9usize;
        assert_eq!(
            scr_logit_file_record(f, 1, buf.as_mut_ptr(), 3, &mut label),
            ScrStatus::Ok
        );
        assert_eq!((buf, label), ([0.5, 2.0, -1.0], 2));
        assert_eq!(
            scr_logit_file_record(f, 2, buf.as_mut_ptr(), 3, &mut label),
            ScrStatus::OutOfRange
        );
        assert_eq!(
            scr_logit_file_record(f, 0, buf.as_mut_ptr(), 2, &mut label),
            ScrStatus::InvalidArgument
        );

        let mut curve = ptr::null_mut();
        assert_eq!(
            scr_logit_file_rc_curve(f, SCR_SCORE_MSP, &mut curve),
            ScrStatus::Ok
        );
        let mut a = 0.0;
        assert_eq!(scr_rc_curve_aurc(curve, &mut a), ScrStatus::Ok);
        // Confident record correct, second one wrong.
        assert!((a - 0.25).abs() < 1e-15);
        scr_rc_curve_free(curve);
        scr_logit_file_free(f);

        let missing = dir.path().join("missing.logits");
        assert_eq!(
            scr_logit_file_load(cpath(&missing).as_ptr(), &mut f),
            ScrStatus::Io
        );
        let bad = dir.path().join("bad.logits");
        std::fs::write(&bad, "# screject-logits v1 K=2\n0.1,x,0\n").unwrap();
        assert_eq!(
            scr_logit_file_load(cpath(&bad).as_ptr(), &mut f),
            ScrStatus::Parse
        );
        assert!(last_error().contains(":2:"));
        std::fs::write(&bad, "# screject-logits v1 K=2\n0.1,0.2,2\n").unwrap();
        assert_eq!(
            scr_logit_file_load(cpath(&bad).as_ptr(), &mut f),
            ScrStatus::Format
        );
    }
}

#[test]
fn model_training_and_forward() {
    let mut cfg = scr_train_config_default();
    assert_eq!(cfg.hidden_layers, 2);
    cfg.epochs = 2;
    cfg.hidden_width = 8;
    cfg.hidden_layers = 1;
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(scr_model_train_desk(&cfg, 300, 1, &mut m), ScrStatus::Ok);
        let (mut d, mut k) = (0usize, 0usize);
        assert_eq!(scr_model_shape(m, &mut d, &mut k), ScrStatus::Ok);
        assert_eq!((d, k), (2, 8));
        let x = [1.0, -0.5];
        let mut a = [0.0; 8];
        let mut b = [0.0; 8];
        assert_eq!(
            scr_model_forward(m, x.as_ptr(), 2, a.as_mut_ptr(), 8),
            ScrStatus::Ok
        );
        assert_eq!(
            scr_model_forward(m, x.as_ptr(), 2, b.as_mut_ptr(), 8),
            ScrStatus::Ok
        );
        assert_eq!(a, b);
        assert_eq!(
            scr_model_forward(m, x.as_ptr(), 1, a.as_mut_ptr(), 8),
            ScrStatus::InvalidArgument
        );
        scr_model_free(m);

        cfg.alpha = 1.5;
        assert_eq!(
            scr_model_train_desk(&cfg, 300, 1, &mut m),
            ScrStatus::InvalidConfig
        );
        cfg.alpha = 0.0;
        // Weight decay of this size flips and inflates every weight each step.
        cfg.learning_rate = 1.0;
        cfg.weight_decay = 1e10;
        cfg.momentum = 0.0;
        cfg.epochs = 10;
        assert_eq!(
            scr_model_train_desk(&cfg, 300, 1, &mut m),
            ScrStatus::Diverged
        );
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(scr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/screject.h")
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header_path()).unwrap();
    for name in [
        "typedef struct ScrRcCurve ScrRcCurve;",
        "SCR_STATUS_NULL_POINTER = 8",
        "ScrStatus scr_rc_curve_new(",
        "void scr_rc_curve_free(",
        "const char *scr_last_error_message(void);",
        "ScrStatus scr_model_train_desk(",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

/// Compiles and runs a small C program against the header and the static
/// library.
#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler found; skipping");
        return;
    }
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    let lib = lib_dir.join("libscreject_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "screject.h"
int main(void) {
    double u[4] = {0.1, 0.2, 0.3, 0.4};
    uint8_t c[4] = {1, 1, 0, 1};
    ScrRcCurve *curve = NULL;
    if (scr_rc_curve_new(u, c, 4, &curve) != SCR_STATUS_OK) return 1;
    double aurc = 0.0;
    if (scr_rc_curve_aurc(curve, &aurc) != SCR_STATUS_OK) return 2;
    scr_rc_curve_free(curve);
    if (scr_rc_curve_aurc(NULL, &aurc) != SCR_STATUS_NULL_POINTER) return 3;
    printf("%.6f\n", aurc);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header_path().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "0.145833\n");
}
