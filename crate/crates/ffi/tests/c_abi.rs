use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use taskvec_ffi::*;

fn last_error() -> String {
    let p = tv_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_suite() -> *mut TvSuite {
    let mut suite = ptr::null_mut();
    let st = unsafe { tv_suite_generate(3, 2, 6, 2, 0.0, 2, 200, 80, &mut suite) };
    assert_eq!(st, TvStatus::Ok);
    suite
}

#[test]
fn round_trip_through_handles() {
    let suite = small_suite();
    assert_eq!(unsafe { tv_suite_n_tasks(suite) }, 2);

    let mut pool = ptr::null_mut();
    assert_eq!(unsafe { tv_pool_build(suite, 3, 8, 100, 0.05, &mut pool) }, TvStatus::Ok);
    assert_eq!(unsafe { (tv_pool_n_tasks(pool), tv_pool_n_blocks(pool)) }, (2, 4));

    let mut len = 0usize;
    let st = unsafe { tv_pool_energy(pool, ptr::null_mut(), 0, &mut len) };
    assert_eq!(st, TvStatus::BufferTooSmall);
    assert_eq!(len, 2);
    let mut energy = vec![0.0; len];
    assert_eq!(unsafe { tv_pool_energy(pool, energy.as_mut_ptr(), len, &mut len) }, TvStatus::Ok);
    assert!((energy[1] - 1.0).abs() < 1e-10);

    let regime = CString::new("sample_specific_vi").unwrap();
    let cfg = CString::new("[train]\nepochs = 2\ngating = true\n").unwrap();
    let mut state = ptr::null_mut();
    let mut m = TvMetrics::default();
    let st = unsafe { tv_train(suite, pool, regime.as_ptr(), 5, cfg.as_ptr(), &mut state, &mut m) };
    assert_eq!(st, TvStatus::Ok, "{}", last_error());
    assert_eq!(m.n_tasks, 2);
    assert!((0.0..=1.0).contains(&m.avg_accuracy) && m.gated_ratio <= 1.0);

    let mut accs = [0.0; 2];
    let mut m2 = TvMetrics::default();
    assert_eq!(unsafe { tv_state_evaluate(state, suite, true, &mut m2, accs.as_mut_ptr(), 2) }, TvStatus::Ok);
    assert_eq!(m2.avg_accuracy, m.avg_accuracy);
    assert!((accs.iter().sum::<f64>() / 2.0 - m.avg_accuracy).abs() < 1e-12);

    let x = [0.1; 12];
    let mut z = [0.0; 16];
    assert_eq!(unsafe { tv_state_coefficients(state, x.as_ptr(), 2, 6, true, z.as_mut_ptr(), 16) }, TvStatus::Ok);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("state.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { tv_state_save(state, path.as_ptr()) }, TvStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { tv_state_load(pool, path.as_ptr(), &mut loaded) }, TvStatus::Ok, "{}", last_error());
    let mut z2 = [0.0; 16];
    assert_eq!(unsafe { tv_state_coefficients(loaded, x.as_ptr(), 2, 6, true, z2.as_mut_ptr(), 16) }, TvStatus::Ok);
    assert_eq!(z, z2);

    unsafe {
        tv_state_free(loaded);
        tv_state_free(state);
        tv_pool_free(pool);
        tv_suite_free(suite);
    }
}

#[test]
fn status_codes_match_cli_exit_codes() {
    let mut suite = ptr::null_mut();
    assert_eq!(unsafe { tv_suite_generate(0, 1, 6, 2, 0.0, 2, 10, 10, &mut suite) }, TvStatus::Config);
    assert!(last_error().contains("n_tasks must be ≥ 2"));
    assert!(suite.is_null());

    let missing = CString::new("/nonexistent/suite").unwrap();
    assert_eq!(unsafe { tv_suite_load(missing.as_ptr(), &mut suite) }, TvStatus::Missing);

    assert_eq!(unsafe { tv_suite_load(ptr::null(), &mut suite) }, TvStatus::InvalidArgument);

    let suite = small_suite();
    let mut pool = ptr::null_mut();
    assert_eq!(unsafe { tv_pool_build(suite, 0, 4, 20, f64::MAX, &mut pool) }, TvStatus::Numerical);
    assert_eq!(unsafe { tv_pool_build(suite, 0, 4, 5, 0.01, &mut pool) }, TvStatus::Ok);
    let bogus = CString::new("bogus").unwrap();
    let mut state = ptr::null_mut();
    let st = unsafe { tv_train(suite, pool, bogus.as_ptr(), 0, ptr::null(), &mut state, ptr::null_mut()) };
    assert_eq!(st, TvStatus::Config);
    assert!(last_error().contains("bogus"));
    unsafe {
        tv_pool_free(pool);
        tv_suite_free(suite);
        tv_suite_free(ptr::null_mut());
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(tv_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn generated_header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("taskvec.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["tv_suite_generate", "tv_pool_build", "tv_train", "tv_state_free", "tv_last_error"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{}\"\nint main(void) {{ TvSuite *s = 0; TvStatus st = tv_suite_load(\"x\", &s); tv_suite_free(s); return st == TV_STATUS_OK; }}\n",
            header.display()
        ),
    )
    .unwrap();
    match Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).status() {
        Ok(status) => assert!(status.success()),
        Err(_) => eprintln!("no C compiler on PATH; header syntax not checked"),
    }
}
