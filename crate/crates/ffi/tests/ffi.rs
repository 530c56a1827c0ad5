use std::ffi::{CStr, CString};
use std::ptr;

use gradsync_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(gs_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn dense(shape: &[usize], values: &[f64]) -> *mut GsGrad {
    let mut out = ptr::null_mut();
    let st = unsafe {
        gs_grad_dense_new(
            shape.as_ptr(),
            shape.len(),
            values.as_ptr(),
            values.len(),
            4,
            &mut out,
        )
    };
    assert_eq!(st, GsStatus::Ok, "{}", last_error());
    out
}

fn slices(shape: &[usize], idx: &[usize], values: &[f64]) -> *mut GsGrad {
    let mut out = ptr::null_mut();
    let st = unsafe {
        gs_grad_slices_new(
            shape.as_ptr(),
            shape.len(),
            idx.as_ptr(),
            idx.len(),
            values.as_ptr(),
            values.len(),
            4,
            &mut out,
        )
    };
    assert_eq!(st, GsStatus::Ok, "{}", last_error());
    out
}

fn materialized(g: *const GsGrad) -> Vec<f64> {
    let mut n = 0usize;
    assert_eq!(unsafe { gs_grad_dense_len(g, &mut n) }, GsStatus::Ok);
    let mut v = vec![0.0; n];
    assert_eq!(
        unsafe { gs_grad_materialize(g, v.as_mut_ptr(), n) },
        GsStatus::Ok
    );
    v
}

#[test]
fn accumulate_dispatch_through_c_abi() {
    let d = dense(&[3, 2], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    let s = slices(&[3, 2], &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let inputs = [d as *const GsGrad, s as *const GsGrad];
    for (rule, want) in [
        (GsRule::Legacy, GsBranch::Gathered),
        (GsRule::Proposed, GsBranch::ConvertedAndReduced),
    ] {
        let mut out = ptr::null_mut();
        let mut branch = GsBranch::Empty;
        let st = unsafe { gs_accumulate(rule, inputs.as_ptr(), 2, &mut out, &mut branch) };
        assert_eq!(st, GsStatus::Ok);
        assert_eq!(branch, want);
        assert_eq!(materialized(out), vec![1.0, 1.0, 1.0, 1.0, 5.0, 7.0]);
        let mut is_dense = false;
        unsafe { gs_grad_is_dense(out, &mut is_dense) };
        assert_eq!(is_dense, rule == GsRule::Proposed);
        unsafe { gs_grad_free(out) };
    }
    let mut out = dense(&[1], &[0.0]);
    let mut branch = GsBranch::Reduced;
    assert_eq!(
        unsafe { gs_accumulate(GsRule::Legacy, ptr::null(), 0, &mut out, &mut branch) },
        GsStatus::Ok
    );
    assert!(out.is_null());
    assert_eq!(branch, GsBranch::Empty);
    let mut bytes = 0u64;
    unsafe { gs_grad_nominal_bytes(s, &mut bytes) };
    assert_eq!(bytes, 2 * 2 * 4);
    unsafe {
        gs_grad_free(d);
        gs_grad_free(s);
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut out = ptr::null_mut();
    let shape = [2usize, 2];
    let st = unsafe {
        gs_grad_slices_new(
            shape.as_ptr(),
            2,
            [5usize].as_ptr(),
            1,
            [0.0, 0.0].as_ptr(),
            2,
            4,
            &mut out,
        )
    };
    assert_eq!(st, GsStatus::Tensor);
    assert!(last_error().contains('5'), "{}", last_error());
    assert_eq!(
        unsafe { gs_grad_is_dense(ptr::null(), &mut false) },
        GsStatus::NullPointer
    );
    let d = dense(&[2], &[1.0, 2.0]);
    let mut small = [0.0; 1];
    assert_eq!(
        unsafe { gs_grad_materialize(d, small.as_mut_ptr(), 1) },
        GsStatus::InvalidArgument
    );
    unsafe { gs_grad_free(d) };
}

#[test]
fn predictions_and_efficiency() {
    let mut out = 0u64;
    let rows = [3u64, 5];
    assert_eq!(
        unsafe { gs_predict_gather_bytes(2, rows.as_ptr(), 4, 4, &mut out) },
        GsStatus::Ok
    );
    assert_eq!(out, 8 * (4 * 4 + 8));
    let shape = [2048usize, 64];
    unsafe { gs_predict_reduce_bytes(shape.as_ptr(), 2, 4, &mut out) };
    assert_eq!(out, 524_288);
    let worlds = [8usize, 300];
    let tput = [1.0, 0.915 * 300.0 / 8.0];
    let (mut sp, mut eff) = ([0.0; 2], [0.0; 2]);
    let st = unsafe {
        gs_compute_efficiency(
            worlds.as_ptr(),
            tput.as_ptr(),
            2,
            8,
            sp.as_mut_ptr(),
            eff.as_mut_ptr(),
        )
    };
    assert_eq!(st, GsStatus::Ok);
    assert_eq!((sp[0], eff[0]), (1.0, 1.0));
    assert!((eff[1] - 0.915).abs() < 1e-12);
    let st = unsafe {
        gs_compute_efficiency(
            worlds.as_ptr(),
            tput.as_ptr(),
            2,
            16,
            sp.as_mut_ptr(),
            eff.as_mut_ptr(),
        )
    };
    assert_eq!(st, GsStatus::InvalidArgument);
}

#[test]
fn config_and_experiment() {
    let text =
        CString::new("world_sizes = 2\nvocab = 16\nhidden = 4\ntokens_per_rank = 4\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { gs_config_parse(GsMode::Compare, text.as_ptr(), &mut cfg) },
        GsStatus::Ok
    );
    let dir = tempfile::tempdir().unwrap();
    let key = CString::new("trace_out").unwrap();
    let val = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { gs_config_set(cfg, key.as_ptr(), val.as_ptr()) },
        GsStatus::Ok
    );
    let mut report = ptr::null_mut();
    assert_eq!(
        unsafe { gs_run_experiment(cfg, &mut report) },
        GsStatus::Ok,
        "{}",
        last_error()
    );
    let json: serde_json::Value =
        serde_json::from_str(unsafe { CStr::from_ptr(report) }.to_str().unwrap()).unwrap();
    assert_eq!(json["world"], 2);
    assert_eq!(json["memory"]["world"], 2);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
    unsafe {
        gs_string_free(report);
        gs_config_free(cfg);
    }

    let bad = CString::new("vocab = many").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { gs_config_parse(GsMode::Weak, bad.as_ptr(), &mut cfg) },
        GsStatus::Config
    );
    assert!(last_error().contains("line 1"), "{}", last_error());
}
