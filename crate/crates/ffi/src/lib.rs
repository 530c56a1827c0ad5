//! C ABI for gradsync.
//!
//! Every fallible call returns a [`GsStatus`]; on failure the message is
//! available from [`gs_last_error`] on the same thread. Objects are opaque
//! handles released with their matching `*_free` function. Strings returned
//! by the library are released with [`gs_string_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use gradsync::costmodel::{predict_gather_bytes, predict_reduce_bytes};
use gradsync::harness::{compute_efficiency, run_experiment, ExperimentConfig, HarnessError, Mode};
use gradsync::tensor::{
    accumulate, materialize, Accumulated, AccumulationRule, DenseGrad, Grad, SliceGrad,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Tensor = 3,
    Config = 4,
    CollectiveAbort = 5,
    Io = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsRule {
    Legacy = 0,
    Proposed = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsBranch {
    Empty = 0,
    PassThrough = 1,
    Reduced = 2,
    Gathered = 3,
    ConvertedAndReduced = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsMode {
    Compare = 0,
    Weak = 1,
    Strong = 2,
}

/// A dense or row-slice gradient.
pub struct GsGrad(Grad);

/// An experiment configuration.
pub struct GsConfig(ExperimentConfig);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

struct Fail(GsStatus, String);

impl Fail {
    fn null(what: &str) -> Self {
        Fail(GsStatus::NullPointer, format!("{what} is null"))
    }

    fn arg(msg: impl Into<String>) -> Self {
        Fail(GsStatus::InvalidArgument, msg.into())
    }
}

impl From<gradsync::tensor::TensorError> for Fail {
    fn from(e: gradsync::tensor::TensorError) -> Self {
        Fail(GsStatus::Tensor, e.to_string())
    }
}

impl From<HarnessError> for Fail {
    fn from(e: HarnessError) -> Self {
        let status = match e {
            HarnessError::Config(_) => GsStatus::Config,
            HarnessError::Collective(_) => GsStatus::CollectiveAbort,
            HarnessError::Io { .. } => GsStatus::Io,
            _ => GsStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GsStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GsStatus::Panic
        }
    }
}

/// Reads `len` items; a null pointer is accepted only when `len == 0`.
unsafe fn items<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        Ok(&[])
    } else if p.is_null() {
        Err(Fail::null(what))
    } else {
        Ok(slice::from_raw_parts(p, len))
    }
}

unsafe fn grad_ref<'a>(g: *const GsGrad) -> Result<&'a Grad, Fail> {
    g.as_ref().map(|g| &g.0).ok_or_else(|| Fail::null("grad"))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::arg(format!("{what} is not UTF-8")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes removed")
        .into_raw()
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn gs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a dense gradient of `shape` with row-major `values`.
///
/// # Safety
/// Pointers must reference at least the given number of elements.
#[no_mangle]
pub unsafe extern "C" fn gs_grad_dense_new(
    shape: *const usize,
    ndim: usize,
    values: *const f64,
    len: usize,
    dtype_width: usize,
    out: *mut *mut GsGrad,
) -> GsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let shape = items(shape, ndim, "shape")?.to_vec();
        let values = items(values, len, "values")?.to_vec();
        let d = DenseGrad::with_dtype_width(shape, values, dtype_width)?;
        *out = Box::into_raw(Box::new(GsGrad(Grad::Dense(d))));
        Ok(())
    })
}

/// Creates a row-slice gradient: `nrows` rows of `dense_shape`, row `i`
/// at `indices[i]`, `values` holding the rows back to back.
///
/// # Safety
/// Pointers must reference at least the given number of elements.
#[no_mangle]
pub unsafe extern "C" fn gs_grad_slices_new(
    dense_shape: *const usize,
    ndim: usize,
    indices: *const usize,
    nrows: usize,
    values: *const f64,
    len: usize,
    dtype_width: usize,
    out: *mut *mut GsGrad,
) -> GsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let shape = items(dense_shape, ndim, "dense_shape")?.to_vec();
        let indices = items(indices, nrows, "indices")?.to_vec();
        let values = items(values, len, "values")?.to_vec();
        let s = SliceGrad::with_dtype_width(shape, indices, values, dtype_width)?;
        *out = Box::into_raw(Box::new(GsGrad(Grad::Slices(s))));
        Ok(())
    })
}

/// Releases a gradient. Null is ignored.
///
/// # Safety
/// `g` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gs_grad_free(g: *mut GsGrad) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Whether the gradient is dense.
///
/// # Safety
/// `g` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gs_grad_is_dense(g: *const GsGrad, out: *mut bool) -> GsStatus {
    guard(|| {
        *out_ptr(out, "out")? = grad_ref(g)?.is_dense();
        Ok(())
    })
}

/// Element count of the gradient's dense form.
///
/// # Safety
/// `g` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gs_grad_dense_len(g: *const GsGrad, out: *mut usize) -> GsStatus {
    guard(|| {
        *out_ptr(out, "out")? = grad_ref(g)?.dense_shape().iter().product();
        Ok(())
    })
}

/// Nominal payload bytes: dense elements, or stored slice rows, times the
/// element width.
///
/// # Safety
/// `g` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gs_grad_nominal_bytes(g: *const GsGrad, out: *mut u64) -> GsStatus {
    guard(|| {
        *out_ptr(out, "out")? = grad_ref(g)?.nominal_byte_size();
        Ok(())
    })
}

/// Writes the dense form into `out`, which must hold exactly the dense
/// element count (see [`gs_grad_dense_len`]).
///
/// # Safety
/// `g` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gs_grad_materialize(
    g: *const GsGrad,
    out: *mut f64,
    len: usize,
) -> GsStatus {
    guard(|| {
        let d = materialize(grad_ref(g)?);
        if d.len() != len {
            return Err(Fail::arg(format!(
                "output holds {len} values, gradient has {}",
                d.len()
            )));
        }
        if len > 0 {
            if out.is_null() {
                return Err(Fail::null("out"));
            }
            slice::from_raw_parts_mut(out, len).copy_from_slice(d.values());
        }
        Ok(())
    })
}

/// Accumulates `n` contributions to one variable. `*out` receives a new
/// handle, or null for an empty input list; `*branch` the branch taken.
///
/// # Safety
/// `inputs` must hold `n` live handles; `out` and `branch` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_accumulate(
    rule: GsRule,
    inputs: *const *const GsGrad,
    n: usize,
    out: *mut *mut GsGrad,
    branch: *mut GsBranch,
) -> GsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let branch = out_ptr(branch, "branch")?;
        let grads = items(inputs, n, "inputs")?
            .iter()
            .map(|&g| grad_ref(g).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        let rule = match rule {
            GsRule::Legacy => AccumulationRule::Legacy,
            GsRule::Proposed => AccumulationRule::Proposed,
        };
        let acc = accumulate(rule, &grads)?;
        *branch = match &acc {
            Accumulated::Empty => GsBranch::Empty,
            Accumulated::PassThrough(_) => GsBranch::PassThrough,
            Accumulated::Reduced(_) => GsBranch::Reduced,
            Accumulated::Gathered(_) => GsBranch::Gathered,
            Accumulated::ConvertedAndReduced(_) => GsBranch::ConvertedAndReduced,
        };
        *out = match acc.into_grad() {
            Some(g) => Box::into_raw(Box::new(GsGrad(g))),
            None => ptr::null_mut(),
        };
        Ok(())
    })
}

/// Allgather receive-buffer bytes for per-rank row counts `rows[0..world]`.
///
/// # Safety
/// `rows` must hold `world` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_predict_gather_bytes(
    world: usize,
    rows: *const u64,
    row_width: u64,
    dtype_width: u64,
    out: *mut u64,
) -> GsStatus {
    guard(|| {
        let rows = items(rows, world, "rows")?;
        *out_ptr(out, "out")? = predict_gather_bytes(world, rows, row_width, dtype_width)
            .map_err(|e| Fail::arg(e.to_string()))?;
        Ok(())
    })
}

/// Allreduce payload bytes of a dense tensor of `shape`.
///
/// # Safety
/// `shape` must hold `ndim` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_predict_reduce_bytes(
    shape: *const usize,
    ndim: usize,
    dtype_width: u64,
    out: *mut u64,
) -> GsStatus {
    guard(|| {
        let shape = items(shape, ndim, "shape")?;
        *out_ptr(out, "out")? = predict_reduce_bytes(shape, dtype_width);
        Ok(())
    })
}

/// Speedup and efficiency of each `(worlds[i], throughputs[i])` against
/// `base`. World sizes must be distinct.
///
/// # Safety
/// Input arrays must hold `n` values; output arrays room for `n`.
#[no_mangle]
pub unsafe extern "C" fn gs_compute_efficiency(
    worlds: *const usize,
    throughputs: *const f64,
    n: usize,
    base: usize,
    speedup_out: *mut f64,
    efficiency_out: *mut f64,
) -> GsStatus {
    guard(|| {
        let worlds = items(worlds, n, "worlds")?;
        let throughputs = items(throughputs, n, "throughputs")?;
        let map: BTreeMap<usize, f64> = worlds
            .iter()
            .copied()
            .zip(throughputs.iter().copied())
            .collect();
        if map.len() != n {
            return Err(Fail::arg("world sizes must be distinct"));
        }
        let rows = compute_efficiency(&map, base)?;
        if n > 0 && (speedup_out.is_null() || efficiency_out.is_null()) {
            return Err(Fail::null("output array"));
        }
        for (i, w) in worlds.iter().enumerate() {
            let row = rows
                .iter()
                .find(|r| r.world == *w)
                .expect("every world has a row");
            *speedup_out.add(i) = row.speedup;
            *efficiency_out.add(i) = row.efficiency;
        }
        Ok(())
    })
}

/// Parses flat `key = value` config text for `mode`.
///
/// # Safety
/// `source` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gs_config_parse(
    mode: GsMode,
    source: *const c_char,
    out: *mut *mut GsConfig,
) -> GsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let mode = match mode {
            GsMode::Compare => Mode::Compare,
            GsMode::Weak => Mode::WeakScaling,
            GsMode::Strong => Mode::StrongScaling,
        };
        let cfg = ExperimentConfig::from_text(mode, text(source, "source")?)
            .map_err(|e| Fail(GsStatus::Config, e.to_string()))?;
        *out = Box::into_raw(Box::new(GsConfig(cfg)));
        Ok(())
    })
}

/// Overrides one setting.
///
/// # Safety
/// `cfg` must be a live handle; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gs_config_set(
    cfg: *mut GsConfig,
    key: *const c_char,
    value: *const c_char,
) -> GsStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| Fail::null("cfg"))?;
        cfg.0
            .set(text(key, "key")?, text(value, "value")?)
            .map_err(|e| Fail(GsStatus::Config, e.to_string()))
    })
}

/// Releases a config. Null is ignored.
///
/// # Safety
/// `cfg` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gs_config_free(cfg: *mut GsConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the experiment and returns its report (JSON, or CSV when the
/// config says so) in `*report_out`. Trace and report files are written
/// when the config names output paths.
///
/// # Safety
/// `cfg` must be a live handle and `report_out` writable.
#[no_mangle]
pub unsafe extern "C" fn gs_run_experiment(
    cfg: *const GsConfig,
    report_out: *mut *mut c_char,
) -> GsStatus {
    guard(|| {
        let cfg = &cfg.as_ref().ok_or_else(|| Fail::null("cfg"))?.0;
        let report_out = out_ptr(report_out, "report_out")?;
        let output = run_experiment(cfg)?;
        output.write(cfg)?;
        *report_out = into_c_string(output.rendered_report(cfg.csv));
        Ok(())
    })
}
