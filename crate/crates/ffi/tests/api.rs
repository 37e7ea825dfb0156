use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use flicker_ews::detector::{self, EnsembleSpec};
use flicker_ews::features::assemble_channels;
use flicker_ews::neuralnet::{Architecture, Checkpoint, Network};
use flicker_ews_ffi::*;

fn tiny_checkpoint(dir: &Path, native: usize, seed: u64) -> (PathBuf, Checkpoint) {
    let arch = Architecture {
        input_len: native,
        in_channels: 2,
        conv1_filters: 3,
        conv2_filters: 4,
        kernel: 5,
        lstm1_units: 4,
        lstm2_units: 3,
        classes: 2,
        dropout: 0.05,
    };
    let ckpt = Checkpoint::new(Network::new(arch, seed).unwrap(), native / 5);
    let path = dir.join(format!("m{native}.ckpt"));
    ckpt.save(&path).unwrap();
    (path, ckpt)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(fews_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn load(path: &Path) -> *mut FewsModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { fews_model_load(c.as_ptr(), &mut model) },
        FewsStatus::Ok
    );
    assert!(!model.is_null());
    model
}

fn series(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (i as f64 * 0.05).sin() + 0.2 * (i as f64 * 0.9).cos())
        .collect()
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(fews_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_predict_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ckpt) = tiny_checkpoint(dir.path(), 60, 4);
    let model = load(&path);
    let mut native = 0usize;
    assert_eq!(
        unsafe { fews_model_native_length(model, &mut native) },
        FewsStatus::Ok
    );
    assert_eq!(native, 60);

    let x = series(60);
    let mut p = -1.0;
    assert_eq!(
        unsafe { fews_model_predict(model, x.as_ptr(), x.len(), &mut p) },
        FewsStatus::Ok
    );
    let input = assemble_channels(&x, 12).unwrap().interleaved_f32();
    assert_eq!(p, ckpt.network.predict(&input).unwrap()[1]);

    assert_eq!(
        unsafe { fews_model_predict(model, x.as_ptr(), 59, &mut p) },
        FewsStatus::InvalidArgument
    );
    assert!(last_error().contains("expects 60"));
    unsafe { fews_model_free(model) };
}

#[test]
fn ensemble_scan_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let (pa, ca) = tiny_checkpoint(dir.path(), 40, 1);
    let (pb, cb) = tiny_checkpoint(dir.path(), 50, 2);
    let (ma, mb) = (load(&pa), load(&pb));
    let mut ens = ptr::null_mut();
    unsafe {
        assert_eq!(fews_ensemble_new(&mut ens), FewsStatus::Ok);
        assert_eq!(fews_ensemble_add(ens, ma, 0.1), FewsStatus::Ok);
        assert_eq!(fews_ensemble_add(ens, mb, 0.16), FewsStatus::Ok);
        assert_eq!(fews_ensemble_add(ens, mb, 1.5), FewsStatus::InvalidArgument);
        fews_model_free(ma);
        fews_model_free(mb);
    }
    let x = series(1000);
    let mut trace = ptr::null_mut();
    assert_eq!(
        unsafe { fews_ensemble_scan(ens, x.as_ptr(), x.len(), &mut trace) },
        FewsStatus::Ok
    );
    let n = unsafe { fews_trace_len(trace) };
    let mut idx = vec![0usize; n];
    let mut p = vec![0.0; n];
    assert_eq!(
        unsafe { fews_trace_copy(trace, idx.as_mut_ptr(), p.as_mut_ptr(), n - 1) },
        FewsStatus::BufferTooSmall
    );
    assert_eq!(
        unsafe { fews_trace_copy(trace, idx.as_mut_ptr(), p.as_mut_ptr(), n) },
        FewsStatus::Ok
    );

    let spec = EnsembleSpec::new(vec![ca, cb], &[0.1, 0.16]).unwrap();
    let want = detector::scan_series(&x, &spec).unwrap();
    assert_eq!(idx, want.times);
    assert_eq!(p, want.p_flicker);

    let mut score = -1.0;
    assert_eq!(
        unsafe { fews_trace_conservative_score(trace, &mut score) },
        FewsStatus::Ok
    );
    assert_eq!(score, detector::trace_conservative_score(&want).unwrap());

    let mut short = ptr::null_mut();
    assert_eq!(
        unsafe { fews_ensemble_scan(ens, x.as_ptr(), 5, &mut short) },
        FewsStatus::DataError
    );
    assert!(short.is_null());
    unsafe {
        fews_trace_free(trace);
        fews_ensemble_free(ens);
    }
}

#[test]
fn scalar_functions() {
    let mut out = 0.0;
    let p = [0.2, 0.9, 0.4];
    assert_eq!(
        unsafe { fews_dl_score(p.as_ptr(), 3, &mut out) },
        FewsStatus::Ok
    );
    assert!((out - 0.4).abs() < 1e-15);

    let x = [0.0, 2.0, 0.0, 4.0];
    assert_eq!(
        unsafe { fews_variance_score(x.as_ptr(), 4, 2, &mut out) },
        FewsStatus::Ok
    );
    assert!((out - 4.0 / (2.0 + 2f64.sqrt())).abs() < 1e-12);

    let mut v = [0.0; 4];
    assert_eq!(
        unsafe { fews_rolling_variance([1.0, 2.0, 4.0, 7.0].as_ptr(), 4, 2, v.as_mut_ptr()) },
        FewsStatus::Ok
    );
    assert_eq!(v, [0.25, 0.25, 1.0, 2.25]);

    let (pos, neg) = ([0.8, 0.4], [0.6, 0.2]);
    assert_eq!(
        unsafe { fews_roc_auc(pos.as_ptr(), 2, neg.as_ptr(), 2, &mut out) },
        FewsStatus::Ok
    );
    assert!((out - 0.75).abs() < 1e-15);
    assert_eq!(
        unsafe { fews_roc_auc(pos.as_ptr(), 2, neg.as_ptr(), 0, &mut out) },
        FewsStatus::InvalidArgument
    );
}

#[test]
fn simulate_named_is_seeded() {
    let name = CString::new("tanh").unwrap();
    let mut a = vec![0.0; 500];
    let mut b = vec![0.0; 500];
    unsafe {
        assert_eq!(
            fews_simulate_named(name.as_ptr(), FewsRegime::Null, 500, 9, 2, a.as_mut_ptr()),
            FewsStatus::Ok
        );
        assert_eq!(
            fews_simulate_named(name.as_ptr(), FewsRegime::Null, 500, 9, 2, b.as_mut_ptr()),
            FewsStatus::Ok
        );
    }
    assert_eq!(a, b);
    let bogus = CString::new("quartic").unwrap();
    assert_eq!(
        unsafe { fews_simulate_named(bogus.as_ptr(), FewsRegime::Null, 500, 9, 0, a.as_mut_ptr()) },
        FewsStatus::InvalidArgument
    );
    assert!(last_error().contains("quartic"));
}

#[test]
fn null_pointers_are_reported() {
    let mut out = 0.0;
    assert_eq!(
        unsafe { fews_dl_score(ptr::null(), 3, &mut out) },
        FewsStatus::NullPointer
    );
    assert_eq!(
        unsafe { fews_dl_score([0.1].as_ptr(), 1, ptr::null_mut()) },
        FewsStatus::NullPointer
    );
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { fews_model_load(ptr::null(), &mut model) },
        FewsStatus::NullPointer
    );
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(
        unsafe { fews_model_load(missing.as_ptr(), &mut model) },
        FewsStatus::DataError
    );
    assert!(model.is_null());
    assert_eq!(unsafe { fews_trace_len(ptr::null()) }, 0);
    unsafe {
        fews_model_free(ptr::null_mut());
        fews_ensemble_free(ptr::null_mut());
        fews_trace_free(ptr::null_mut());
    }
}

fn header_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/flicker_ews.h")
}

fn c_compiler() -> Option<&'static str> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
}

#[test]
fn header_declares_the_api() {
    let text = std::fs::read_to_string(header_path()).unwrap();
    for name in [
        "fews_model_load",
        "fews_ensemble_scan",
        "fews_trace_copy",
        "fews_roc_auc",
        "fews_last_error_message",
        "FEWS_STATUS_BUFFER_TOO_SMALL",
        "typedef struct FewsModel FewsModel",
    ] {
        assert!(text.contains(name), "{name}");
    }
}

#[test]
fn c_program_links_against_static_library() {
    let Some(cc) = c_compiler() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libflicker_ews_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "flicker_ews.h"
int main(void) {
    double p[3] = {0.2, 0.9, 0.4};
    double s = 0.0;
    if (fews_dl_score(p, 3, &s) != FEWS_STATUS_OK) return 1;
    if (fews_dl_score(NULL, 3, &s) != FEWS_STATUS_NULL_POINTER) return 2;
    if (fews_last_error_message()[0] == '\0') return 3;
    printf("%.3f %s\n", s, fews_version());
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new(cc)
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
    assert!(out.status.success(), "{out:?}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("0.400 "), "{stdout}");
}
