use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use clu_ffi::*;

fn last_error() -> String {
    let p = clu_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(s: *mut std::ffi::c_char) -> String {
    let out = CStr::from_ptr(s).to_string_lossy().into_owned();
    clu_string_free(s);
    out
}

#[test]
fn coefficients_match_hand_values() {
    let mut out = [0.0; 2];
    unsafe {
        assert_eq!(clu_coeffs_learn([1.0, 2.0].as_ptr(), 2, 5, 5, 1.0, out.as_mut_ptr()), CluStatus::Ok);
        assert_eq!(out, [1.0, 2.0 / 3.0]);
        assert_eq!(clu_coeffs_unlearn([1.0, 3.0].as_ptr(), 2, 0, 5, 1.0, out.as_mut_ptr()), CluStatus::Ok);
        assert_eq!(out, [1.5, 0.5]);
        assert_eq!(clu_coeffs_learn([1.0].as_ptr(), 1, 6, 5, 1.0, out.as_mut_ptr()), CluStatus::InvalidArgument);
    }
    assert!(last_error().contains("iteration 6"));
}

#[test]
fn negative_lambda_is_a_config_error() {
    let mut out = [0.0; 1];
    let s = unsafe { clu_coeffs_unlearn([1.0].as_ptr(), 1, 0, 5, -1.0, out.as_mut_ptr()) };
    assert_eq!(s, CluStatus::Config);
}

#[test]
fn mask_and_slow_step() {
    let mut bits = [9u8; 2];
    unsafe {
        assert_eq!(clu_saliency_mask([2.0, 0.5].as_ptr(), [1.0, 1.0].as_ptr(), 2, 1.0, bits.as_mut_ptr()), CluStatus::Ok);
    }
    assert_eq!(bits, [1, 0]);
    let mut theta = [1.0, 2.0];
    let r = [3.0, 6.0];
    unsafe {
        let p = theta.as_mut_ptr();
        assert_eq!(clu_slow_step(p, r.as_ptr(), 2, 0.5, p), CluStatus::Ok);
    }
    assert_eq!(theta, [2.0, 4.0]);
    let s = unsafe { clu_saliency_mask([1.0].as_ptr(), [1.0].as_ptr(), 1, 0.0, bits.as_mut_ptr()) };
    assert_eq!(s, CluStatus::Config);
}

#[test]
fn null_pointers_are_reported() {
    unsafe {
        assert_eq!(clu_slow_step(ptr::null(), ptr::null(), 3, 0.5, ptr::null_mut()), CluStatus::NullPointer);
        assert!(last_error().contains("theta"));
        assert_eq!(clu_buffer_observe(ptr::null_mut(), 0, 0, ptr::null(), 0), CluStatus::NullPointer);
        assert_eq!(clu_buffer_len(ptr::null()), 0);
        clu_buffer_free(ptr::null_mut());
        clu_string_free(ptr::null_mut());
    }
}

#[test]
fn buffer_handle_life_cycle() {
    let mut b = ptr::null_mut();
    unsafe {
        assert_eq!(clu_buffer_new(3, 7, &mut b), CluStatus::Ok);
        for id in 0..6u64 {
            let x = [id as f64];
            assert_eq!(clu_buffer_observe(b, id, (id % 2) as usize, x.as_ptr(), 1), CluStatus::Ok);
        }
        assert_eq!(clu_buffer_len(b), 3);
        assert_eq!(clu_buffer_observe(b, 99, 0, [0.0].as_ptr(), 1), CluStatus::Ok);
        let dup = if clu_buffer_contains(b, 99) { 99 } else { (0..6).find(|&i| clu_buffer_contains(b, i)).unwrap() };
        assert_eq!(clu_buffer_observe(b, dup, 0, [0.0].as_ptr(), 1), CluStatus::InvalidArgument);
        let mut removed = 0usize;
        let held: Vec<u64> = (0..100).filter(|&i| clu_buffer_contains(b, i)).collect();
        assert_eq!(clu_buffer_erase_samples(b, held.as_ptr(), held.len(), &mut removed), CluStatus::Ok);
        assert_eq!(removed, 3);
        assert_eq!(clu_buffer_len(b), 0);
        assert_eq!(clu_buffer_erase_classes(b, [0usize].as_ptr(), 1, ptr::null_mut()), CluStatus::Ok);
        clu_buffer_free(b);
    }
}

#[test]
fn experiment_runs_from_toml() {
    let toml = CString::new(
        r#"
seeds = [0]
sequence = "(+0,1),(+2,3),(-1)"
method = "er_ft"
[dataset]
kind = "blobs"
classes = 4
dim = 3
train_per_class = 20
test_per_class = 10
[model]
kind = "mlp"
hidden = [6]
[training]
learn_epochs = 2
unlearn_steps = 4
[oracle]
epochs = 3
[eval]
mia_samples = 20
mia_iterations = 30
"#,
    )
    .unwrap();
    let mut exp = ptr::null_mut();
    let mut json = ptr::null_mut();
    unsafe {
        assert_eq!(clu_experiment_from_toml(toml.as_ptr(), &mut exp), CluStatus::Ok);
        assert_eq!(clu_experiment_run_seed(exp, 0, &mut json), CluStatus::Ok);
        let first = take(json);
        assert_eq!(clu_experiment_run_seed(exp, 0, &mut json), CluStatus::Ok);
        assert_eq!(first, take(json));
        clu_experiment_free(exp);
        let v: serde_json::Value = serde_json::from_str(&first).unwrap();
        assert_eq!(v["method"], "er_ft");
        assert!(v["metrics"]["la"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn bad_toml_is_a_config_error() {
    let bad = CString::new("seeds = [0]\nsequence = \"(+0\"").unwrap();
    let mut exp = ptr::null_mut();
    assert_eq!(unsafe { clu_experiment_from_toml(bad.as_ptr(), &mut exp) }, CluStatus::Config);
    assert!(exp.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn verify_reports_json() {
    let mut json = ptr::null_mut();
    let mut passed = false;
    unsafe {
        assert_eq!(clu_verify(5, false, &mut passed, &mut json), CluStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take(json)).unwrap();
        assert!(passed);
        assert_eq!(v["passed"], true);
    }
}

#[test]
fn header_declares_every_export() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/clu.h")).unwrap();
    let src = std::fs::read_to_string(dir.join("src/lib.rs")).unwrap();
    let exported: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exported.len() >= 15);
    for name in exported {
        assert!(header.contains(&format!("{name}(")), "{name} missing from clu.h");
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libclu_ffi.a");
    assert!(lib.is_file(), "{} not built", lib.display());
    let exe = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("clu_smoke");
    let status = Command::new("cc")
        .arg(dir.join("tests/smoke.c"))
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "smoke exited with {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("clu 0.1.0 ok"));
}
