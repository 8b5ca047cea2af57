//! C ABI over the core library: opaque model handles, error codes, and
//! a thread-local last-error message. The header is generated into
//! `include/ctxmpc.h` at build time.
//!
//! Conventions:
//! - Matrices cross the boundary as row-major `double` arrays.
//! - Every fallible call returns a [`CtxmpcStatus`]; on failure the
//!   message is available via `ctxmpc_last_error`.
//! - Handles returned by `ctxmpc_model_new` must be released with
//!   `ctxmpc_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ctxmpc::dynamics::step;
use ctxmpc::harness::{build_scenario, replay_run_dir, run_scenario, write_outputs, RunConfig};
use ctxmpc::lqr::{spectral_radius, SystemModel};
use ctxmpc::mpc::{mpc_action_batch, mpc_action_explicit, PredictionWindow};
use nalgebra::{DMatrix, DVector};

/// Status codes returned by every fallible call.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtxmpcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NumericFailure = 3,
    IoError = 4,
    ConfigError = 5,
    ReplayMismatch = 6,
    Panic = 7,
}

/// Matrix selector for `ctxmpc_model_matrix`.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtxmpcMatrix {
    RiccatiP = 0,
    GainK = 1,
    ClosedLoopF = 2,
    ExcessMetricH = 3,
}

/// Opaque model handle.
pub struct CtxmpcModel {
    inner: SystemModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: impl Into<String>) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message.into());
}

fn status_of(err: &ctxmpc::Error) -> CtxmpcStatus {
    use ctxmpc::Error;
    match err {
        Error::Dimension { .. } | Error::InvalidProbability(_) | Error::InvalidRadius(_) => {
            CtxmpcStatus::InvalidArgument
        }
        Error::Config(_) | Error::Json(_) | Error::InvalidSchedule { .. } => {
            CtxmpcStatus::ConfigError
        }
        Error::Io(_) => CtxmpcStatus::IoError,
        _ => CtxmpcStatus::NumericFailure,
    }
}

fn guard(body: impl FnOnce() -> CtxmpcStatus) -> CtxmpcStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            CtxmpcStatus::Panic
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ctxmpc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the last error message for the calling thread into `buf`
/// (NUL-terminated, truncated to `cap`). Returns the full message
/// length in bytes, not counting the terminator.
///
/// # Safety
/// `buf` must point to `cap` writable bytes (or be NULL with `cap` 0
/// to query the length).
#[no_mangle]
pub unsafe extern "C" fn ctxmpc_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        let bytes = message.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

unsafe fn matrix_from_ptr(
    name: &str,
    ptr: *const f64,
    rows: usize,
    cols: usize,
) -> Result<DMatrix<f64>, CtxmpcStatus> {
    if ptr.is_null() {
        set_error(format!("{name}: null pointer"));
        return Err(CtxmpcStatus::NullPointer);
    }
    if rows == 0 || cols == 0 {
        set_error(format!("{name}: zero dimension"));
        return Err(CtxmpcStatus::InvalidArgument);
    }
    let data = std::slice::from_raw_parts(ptr, rows * cols);
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

/// Build a model from row-major `A (n×n)`, `B (n×m)`, `Q (n×n)`,
/// `R (m×m)` and the disturbance norm bound. On success `*out` owns a
/// new handle.
///
/// # Safety
/// The matrix pointers must reference arrays of the stated sizes and
/// `out` must be a valid location for one pointer.
#[no_mangle]
pub unsafe extern "C" fn ctxmpc_model_new(
    n: usize,
    m: usize,
    a: *const f64,
    b: *const f64,
    q: *const f64,
    r: *const f64,
    w_bound: f64,
    out: *mut *mut CtxmpcModel,
) -> CtxmpcStatus {
    guard(|| {
        if out.is_null() {
            set_error("out: null pointer");
            return CtxmpcStatus::NullPointer;
        }
        let parts = (|| -> Result<SystemModel, CtxmpcStatus> {
            let a = matrix_from_ptr("A", a, n, n)?;
            let b = matrix_from_ptr("B", b, n, m)?;
            let q = matrix_from_ptr("Q", q, n, n)?;
            let r = matrix_from_ptr("R", r, m, m)?;
            SystemModel::new(a, b, q, r, w_bound).map_err(|e| {
                set_error(e.to_string());
                status_of(&e)
            })
        })();
        match parts {
            Ok(model) => {
                *out = Box::into_raw(Box::new(CtxmpcModel { inner: model }));
                CtxmpcStatus::Ok
            }
            Err(status) => status,
        }
    })
}

/// Release a handle returned by `ctxmpc_model_new`.
///
/// # Safety
/// `model` must be a pointer previously returned by `ctxmpc_model_new`
/// and not freed since; NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn ctxmpc_model_free(model: *mut CtxmpcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctxmpc_model_state_dim(model: *const CtxmpcModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).inner.state_dim()
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctxmpc_model_input_dim(model: *const CtxmpcModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).inner.input_dim()
}

/// Spectral radius of the closed loop `A − BK`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ctxmpc_model_spectral_radius(
    model: *const CtxmpcModel,
    out: *mut f64,
) -> CtxmpcStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            set_error("null pointer");
            return CtxmpcStatus::NullPointer;
        }
        *out = spectral_radius((*model).inner.closed_loop_f());
        CtxmpcStatus::Ok
    })
}

/// Max-abs residual of the stored Riccati solution.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ctxmpc_model_dare_residual(
    model: *const CtxmpcModel,
    out: *mut f64,
) -> CtxmpcStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            set_error("null pointer");
            return CtxmpcStatus::NullPointer;
        }
        *out = (*model).inner.dare_residual();
        CtxmpcStatus::Ok
    })
}

/// Copy one derived matrix out, row-major. `P`, `F`, `H` are `n×n`;
/// `K` is `m×n`. `cap` is the buffer length in doubles.
///
/// # Safety
/// `model` must be a live handle; `out` must point to `cap` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn ctxmpc_model_matrix(
    model: *const CtxmpcModel,
    which: CtxmpcMatrix,
    out: *mut f64,
    cap: usize,
) -> CtxmpcStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            set_error("null pointer");
            return CtxmpcStatus::NullPointer;
        }
        let inner = &(*model).inner;
        let matrix = match which {
            CtxmpcMatrix::RiccatiP => inner.p(),
            CtxmpcMatrix::GainK => inner.gain_k(),
            CtxmpcMatrix::ClosedLoopF => inner.closed_loop_f(),
            CtxmpcMatrix::ExcessMetricH => inner.h(),
        };
        let needed = matrix.nrows() * matrix.ncols();
        if cap < needed {
            set_error(format!("buffer holds {cap} doubles, need {needed}"));
            return CtxmpcStatus::InvalidArgument;
        }
        for i in 0..matrix.nrows() {
            for j in 0..matrix.ncols() {
                *out.add(i * matrix.ncols() + j) = matrix[(i, j)];
            }
        }
        CtxmpcStatus::Ok
    })
}

unsafe fn window_from_ptr(
    model: &SystemModel,
    predictions: *const f64,
    count: usize,
) -> Result<PredictionWindow, CtxmpcStatus> {
    if predictions.is_null() {
        set_error("predictions: null pointer");
        return Err(CtxmpcStatus::NullPointer);
    }
    if count == 0 {
        set_error("predictions: need at least one step");
        return Err(CtxmpcStatus::InvalidArgument);
    }
    let n = model.state_dim();
    let data = std::slice::from_raw_parts(predictions, count * n);
    let preds: Vec<DVector<f64>> = (0..count)
        .map(|i| DVector::from_row_slice(&data[i * n..(i + 1) * n]))
        .collect();
    PredictionWindow::new(0, preds, model.w_bound()).map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

/// Explicit MPC action for state `x` (length n) and `pred_count`
/// stacked disturbance predictions (row-major, `pred_count × n`).
/// Writes the input (length m) into `u_out`.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn ctxmpc_mpc_action(
    model: *const CtxmpcModel,
    x: *const f64,
    predictions: *const f64,
    pred_count: usize,
    u_out: *mut f64,
) -> CtxmpcStatus {
    guard(|| {
        if model.is_null() || x.is_null() || u_out.is_null() {
            set_error("null pointer");
            return CtxmpcStatus::NullPointer;
        }
        let inner = &(*model).inner;
        let n = inner.state_dim();
        let state = DVector::from_row_slice(std::slice::from_raw_parts(x, n));
        let window = match window_from_ptr(inner, predictions, pred_count) {
            Ok(w) => w,
            Err(status) => return status,
        };
        match mpc_action_explicit(inner, &state, &window) {
            Ok(u) => {
                for (i, v) in u.iter().enumerate() {
                    *u_out.add(i) = *v;
                }
                CtxmpcStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Full open-loop batch solution (pred_count × m, row-major) of the
/// windowed program; cross-check route for the explicit action.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn ctxmpc_mpc_action_batch(
    model: *const CtxmpcModel,
    x: *const f64,
    predictions: *const f64,
    pred_count: usize,
    u_out: *mut f64,
) -> CtxmpcStatus {
    guard(|| {
        if model.is_null() || x.is_null() || u_out.is_null() {
            set_error("null pointer");
            return CtxmpcStatus::NullPointer;
        }
        let inner = &(*model).inner;
        let n = inner.state_dim();
        let m = inner.input_dim();
        let state = DVector::from_row_slice(std::slice::from_raw_parts(x, n));
        let window = match window_from_ptr(inner, predictions, pred_count) {
            Ok(w) => w,
            Err(status) => return status,
        };
        match mpc_action_batch(inner, &state, &window) {
            Ok(us) => {
                for (i, u) in us.iter().enumerate() {
                    for j in 0..m {
                        *u_out.add(i * m + j) = u[j];
                    }
                }
                CtxmpcStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// One plant step `x' = Ax + Bu + w`; all vectors length n (u length m).
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn ctxmpc_step(
    model: *const CtxmpcModel,
    x: *const f64,
    u: *const f64,
    w: *const f64,
    x_out: *mut f64,
) -> CtxmpcStatus {
    guard(|| {
        if model.is_null() || x.is_null() || u.is_null() || w.is_null() || x_out.is_null() {
            set_error("null pointer");
            return CtxmpcStatus::NullPointer;
        }
        let inner = &(*model).inner;
        let n = inner.state_dim();
        let m = inner.input_dim();
        let xv = DVector::from_row_slice(std::slice::from_raw_parts(x, n));
        let uv = DVector::from_row_slice(std::slice::from_raw_parts(u, m));
        let wv = DVector::from_row_slice(std::slice::from_raw_parts(w, n));
        match step(inner, &xv, &uv, &wv) {
            Ok(next) => {
                for (i, v) in next.iter().enumerate() {
                    *x_out.add(i) = *v;
                }
                CtxmpcStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

unsafe fn path_from_cstr(name: &str, ptr: *const c_char) -> Result<String, CtxmpcStatus> {
    if ptr.is_null() {
        set_error(format!("{name}: null pointer"));
        return Err(CtxmpcStatus::NullPointer);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s.to_owned()),
        Err(_) => {
            set_error(format!("{name}: invalid UTF-8"));
            Err(CtxmpcStatus::InvalidArgument)
        }
    }
}

/// Execute a JSON run config: one trace per seed plus a summary under
/// `<out_dir>/<digest>/`.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ctxmpc_run_config(
    config_path: *const c_char,
    out_dir: *const c_char,
) -> CtxmpcStatus {
    guard(|| {
        let config_path = match path_from_cstr("config_path", config_path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        let out_dir = match path_from_cstr("out_dir", out_dir) {
            Ok(p) => p,
            Err(status) => return status,
        };
        let run = (|| -> ctxmpc::Result<()> {
            let config = RunConfig::from_file(Path::new(&config_path))?;
            let scenario = build_scenario(&config)?;
            let traces = run_scenario(&config)?;
            write_outputs(&config, &scenario, &traces, Path::new(&out_dir))?;
            Ok(())
        })();
        match run {
            Ok(()) => CtxmpcStatus::Ok,
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Re-run a stored run directory and byte-compare the traces.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ctxmpc_replay(run_dir: *const c_char) -> CtxmpcStatus {
    guard(|| {
        let run_dir = match path_from_cstr("run_dir", run_dir) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match replay_run_dir(Path::new(&run_dir)) {
            Ok(true) => CtxmpcStatus::Ok,
            Ok(false) => {
                set_error("replayed traces differ from the stored bytes");
                CtxmpcStatus::ReplayMismatch
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}
