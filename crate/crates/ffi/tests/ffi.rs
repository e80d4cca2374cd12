use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use semiwave_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let mut buf = [0 as c_char; 512];
    unsafe {
        sw_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn forward_solve_through_handles() {
    unsafe {
        let mut d = ptr::null_mut();
        assert_eq!(sw_domain_rectangle(1.0, 1.0, &mut d), SwStatus::Ok);
        let mut g = ptr::null_mut();
        assert_eq!(sw_grid_new(d, 9, 0.5, 0.5, &mut g), SwStatus::Ok);
        let (mut nodes, mut levels, mut dt) = (0usize, 0usize, 0.0);
        assert_eq!(sw_grid_dims(g, &mut nodes, &mut levels, &mut dt), SwStatus::Ok);
        assert_eq!(nodes, 81);
        assert!(dt > 0.0 && levels >= 9);

        let mut f = ptr::null_mut();
        assert_eq!(sw_nonlinearity_from_json(c(r#"{"kind": "cubic"}"#).as_ptr(), &mut f), SwStatus::Ok);
        let (mut v, mut dv) = (0.0, 0.0);
        assert_eq!(sw_nonlinearity_eval(f, 0.1, 0.2, 0.3, 2.0, &mut v), SwStatus::Ok);
        assert_eq!(sw_nonlinearity_du(f, 0.1, 0.2, 0.3, 2.0, &mut dv), SwStatus::Ok);
        assert_eq!((v, dv), (8.0, 12.0));

        let data = c(r#"{"f": {"kind": "constant", "value": 0.0}, "u0": {"kind": "constant", "value": 0.0}, "u1": {"kind": "constant", "value": 0.0}}"#);
        let mut u = ptr::null_mut();
        assert_eq!(sw_solve(f, g, data.as_ptr(), &mut u), SwStatus::Ok);
        let mut sup = 1.0;
        assert_eq!(sw_field_sup_abs(u, &mut sup), SwStatus::Ok);
        assert_eq!(sup, 0.0);
        let mut buf = vec![1.0; nodes];
        assert_eq!(sw_field_level(u, levels - 1, buf.as_mut_ptr(), buf.len()), SwStatus::Ok);
        assert!(buf.iter().all(|x| *x == 0.0));
        assert_eq!(sw_field_level(u, levels, buf.as_mut_ptr(), buf.len()), SwStatus::Config);

        sw_field_free(u);
        sw_nonlinearity_free(f);
        sw_grid_free(g);
        sw_domain_free(d);
    }
}

#[test]
fn failures_set_status_and_message() {
    unsafe {
        let mut d = ptr::null_mut();
        assert_eq!(sw_domain_interval(-1.0, &mut d), SwStatus::Config);
        assert!(d.is_null());
        assert!(last_error().contains("extent"), "{}", last_error());

        assert_eq!(sw_domain_interval(1.0, ptr::null_mut()), SwStatus::NullPointer);
        assert_eq!(last_error(), "out is null");

        let mut f = ptr::null_mut();
        assert_eq!(sw_nonlinearity_from_json(c("{\"kind\": ").as_ptr(), &mut f), SwStatus::Config);
        let bad = [0xffu8 as c_char, 0];
        assert_eq!(sw_nonlinearity_from_json(bad.as_ptr(), &mut f), SwStatus::InvalidUtf8);

        // u_tt = u^2 from a large constant blows up well before t = 2
        assert_eq!(sw_domain_interval(3.0, &mut d), SwStatus::Ok);
        let mut g = ptr::null_mut();
        assert_eq!(sw_grid_new(d, 17, 2.0, 0.5, &mut g), SwStatus::Ok);
        assert_eq!(sw_nonlinearity_from_json(c(r#"{"kind": "blowup_quadratic"}"#).as_ptr(), &mut f), SwStatus::Ok);
        let data = c(r#"{"f": {"kind": "constant", "value": 20.0}, "u0": {"kind": "constant", "value": 20.0}, "u1": {"kind": "constant", "value": 0.0}}"#);
        let mut u = ptr::null_mut();
        assert_eq!(sw_solve(f, g, data.as_ptr(), &mut u), SwStatus::Numerical);
        assert!(u.is_null());

        sw_nonlinearity_free(f);
        sw_grid_free(g);
        sw_domain_free(d);
        sw_domain_free(ptr::null_mut());
    }
}

#[test]
fn experiment_report_through_handles() {
    let tmp = tempfile::tempdir().unwrap();
    let config = r#"{
        "schema_version": 1,
        "domain": {"shape": {"kind": "interval", "length": 3.141592653589793}},
        "grid": {"nodes": 33, "horizon": 0.2},
        "nonlinearity": {"kind": "cubic"},
        "initial": {"lambda_max": 1.0, "per_side": 4}
    }"#;
    let out = c(tmp.path().to_str().unwrap());
    unsafe {
        let mut r = ptr::null_mut();
        assert_eq!(sw_run_experiment(c("recover_initial").as_ptr(), c(config).as_ptr(), out.as_ptr(), &mut r), SwStatus::Ok, "{}", last_error());
        let mut err = 1.0;
        assert_eq!(sw_report_value(r, c("du_relative_error").as_ptr(), &mut err), SwStatus::Ok);
        assert!(err <= 1e-12);
        assert_eq!(sw_report_value(r, c("no_such_value").as_ptr(), &mut err), SwStatus::Config);
        let mut json = ptr::null_mut();
        assert_eq!(sw_report_json(r, &mut json), SwStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        sw_string_free(json);
        assert_eq!(text, std::fs::read_to_string(tmp.path().join("report.json")).unwrap());
        sw_report_free(r);

        assert_eq!(sw_run_experiment(c("bogus").as_ptr(), c(config).as_ptr(), out.as_ptr(), &mut r), SwStatus::Config);
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/semiwave.h")
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(header()).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src.lines().filter_map(|l| l.strip_prefix("pub unsafe extern \"C\" fn ")).map(|l| &l[..l.find('(').unwrap()]).collect();
    assert!(exports.len() >= 18, "{exports:?}");
    for name in exports {
        assert!(h.contains(&format!(" {name}(")), "{name} missing from header");
    }
    assert!(h.contains("typedef struct SwDomain SwDomain;"));
}

/// Directory holding the shared library next to this test binary.
fn library_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_library() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(cc.status.success());
    let lib = library_dir();
    if !lib.join("libsemiwave_ffi.so").exists() && !lib.join("libsemiwave_ffi.dylib").exists() {
        eprintln!("shared library not found in {}; skipped", lib.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/smoke.c");
    let build = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg("-L")
        .arg(&lib)
        .args(["-lsemiwave_ffi", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).env("LD_LIBRARY_PATH", &lib).env("DYLD_LIBRARY_PATH", &lib).output().unwrap();
    assert!(run.status.success(), "{}{}", String::from_utf8_lossy(&run.stdout), String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok 33 nodes"));
}
