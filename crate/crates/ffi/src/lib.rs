//! C ABI over the `heishom` crate.
//!
//! Objects cross the boundary as opaque handles created by `*_new` or
//! `*_from_*` functions and released by the matching `*_free`. Every
//! fallible call returns a [`HeishomStatus`]; on failure the message is
//! kept per thread and read with [`heishom_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use heishom::cellsolver::{solve_cell, CellConfig, GridFunction};
use heishom::cli;
use heishom::effective::estimate_fast_moments;
use heishom::model::{validate_params, ControlModel, ModelId, ModelParams};
use heishom::operator::{lyapunov_u1_certificate, neg_generator_chi, FastState};
use heishom::sde::TrajectoryConfig;
use heishom::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeishomStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidParams = 3,
    UnknownModel = 4,
    NoConvergence = 5,
    NumericalBlowup = 6,
    InvalidTimestep = 7,
    Config = 8,
    Io = 9,
    Panic = 10,
}

/// Mean, standard error and effective sample size of a Monte Carlo estimate.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HeishomEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub effective_samples: f64,
}

/// Model parameters (rates, discount, horizon, ladders, seed).
pub struct HeishomParams(ModelParams);

/// A registered control model.
pub struct HeishomModel(ControlModel);

/// Values on a cubic lattice, first coordinate fastest.
pub struct HeishomGridFunction(GridFunction);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> HeishomStatus {
    match e {
        Error::UnknownModel(_) => HeishomStatus::UnknownModel,
        Error::NoConvergence { .. } => HeishomStatus::NoConvergence,
        Error::NumericalBlowup { .. } => HeishomStatus::NumericalBlowup,
        Error::InvalidTimestep { .. } => HeishomStatus::InvalidTimestep,
        Error::Format(_) => HeishomStatus::Io,
        Error::InvalidGamma { .. } | Error::SingularPoint | Error::InvalidArgument(_) => {
            HeishomStatus::InvalidArgument
        }
    }
}

struct Failure(HeishomStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null() -> Failure {
    Failure(HeishomStatus::NullPointer, "null pointer argument".into())
}

/// Runs `f`, recording its error or panic as the last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HeishomStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HeishomStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {message}"));
            HeishomStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null());
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Failure(HeishomStatus::InvalidArgument, "string is not UTF-8".into()))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null());
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(handle: *mut T) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn heishom_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn heishom_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default parameters: k = (5, 5, 1), a = 1, T = 1, one slow dimension.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn heishom_params_new(out: *mut *mut HeishomParams) -> HeishomStatus {
    guard(|| write_out(out, HeishomParams(ModelParams::default())))
}

/// Parameters from a JSON object with the fields of the config's `params`
/// section; absent fields take their defaults. The result is not validated.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn heishom_params_from_json(
    json: *const c_char,
    out: *mut *mut HeishomParams,
) -> HeishomStatus {
    guard(|| {
        let text = read_str(json)?;
        let p: ModelParams = serde_json::from_str(text)
            .map_err(|e| Failure(HeishomStatus::Config, format!("params: {e}")))?;
        write_out(out, HeishomParams(p))
    })
}

/// # Safety
/// `params` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn heishom_params_set_rates(
    params: *mut HeishomParams,
    k1: f64,
    k2: f64,
    k3: f64,
) -> HeishomStatus {
    guard(|| {
        let p = params.as_mut().ok_or_else(null)?;
        (p.0.k1, p.0.k2, p.0.k3) = (k1, k2, k3);
        Ok(())
    })
}

/// `Ok` when every invariant holds, `InvalidParams` otherwise with the
/// violations joined by "; " as the last error.
///
/// # Safety
/// `params` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn heishom_params_validate(params: *const HeishomParams) -> HeishomStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(null)?;
        let report = validate_params(&p.0);
        if report.is_ok() {
            Ok(())
        } else {
            Err(Failure(
                HeishomStatus::InvalidParams,
                format!("params: {}", report.messages().join("; ")),
            ))
        }
    })
}

/// # Safety
/// `params` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn heishom_params_free(params: *mut HeishomParams) {
    free(params)
}

/// # Safety
/// `id` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn heishom_model_new(
    id: *const c_char,
    out: *mut *mut HeishomModel,
) -> HeishomStatus {
    guard(|| {
        let id = ModelId::parse(read_str(id)?)?;
        write_out(out, HeishomModel(ControlModel::new(id)))
    })
}

/// Number of controls of the model.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn heishom_model_n_controls(
    model: *const HeishomModel,
    out: *mut usize,
) -> HeishomStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(null)?;
        *out.as_mut().ok_or_else(null)? = m.0.controls().len();
        Ok(())
    })
}

/// Terminal datum `g(x, y)` for a slow point of length `n_slow`.
///
/// # Safety
/// `x` must point to `n_slow` doubles, `y` to three, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn heishom_model_terminal(
    model: *const HeishomModel,
    x: *const f64,
    n_slow: usize,
    y: *const f64,
    out: *mut f64,
) -> HeishomStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(null)?;
        if x.is_null() || y.is_null() {
            return Err(null());
        }
        if !(1..=heishom::model::MAX_SLOW).contains(&n_slow) {
            return Err(Failure(
                HeishomStatus::InvalidArgument,
                format!("n_slow = {n_slow}"),
            ));
        }
        let x = std::slice::from_raw_parts(x, n_slow);
        let y = std::slice::from_raw_parts(y, 3);
        *out.as_mut().ok_or_else(null)? = m.0.terminal(x, &FastState::new(y[0], y[1], y[2]));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn heishom_model_free(model: *mut HeishomModel) {
    free(model)
}

/// Closed form of `-L chi` for `chi = |y|^2` at `y` (three doubles).
///
/// # Safety
/// `params` must be a live handle, `y` must point to three doubles and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn heishom_neg_generator_chi(
    params: *const HeishomParams,
    y: *const f64,
    out: *mut f64,
) -> HeishomStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(null)?;
        if y.is_null() {
            return Err(null());
        }
        let y = std::slice::from_raw_parts(y, 3);
        *out.as_mut().ok_or_else(null)? =
            neg_generator_chi(&FastState::new(y[0], y[1], y[2]), &p.0);
        Ok(())
    })
}

/// `beta` with `-L U1 >= gamma U1 - beta`.
///
/// # Safety
/// `params` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn heishom_lyapunov_u1_certificate(
    params: *const HeishomParams,
    gamma: f64,
    out: *mut f64,
) -> HeishomStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(null)?;
        let beta = lyapunov_u1_certificate(gamma, &p.0)?;
        *out.as_mut().ok_or_else(null)? = beta;
        Ok(())
    })
}

/// Batch-means estimate of `E_mu[cos y3]` from `n_chains` chains of
/// `total_steps` steps (the first `burn_in_steps` discarded).
///
/// # Safety
/// `params` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn heishom_estimate_cos_y3(
    params: *const HeishomParams,
    dt: f64,
    total_steps: u64,
    burn_in_steps: u64,
    n_chains: usize,
    seed: u64,
    out: *mut HeishomEstimate,
) -> HeishomStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(null)?;
        let out = out.as_mut().ok_or_else(null)?;
        let cfg = TrajectoryConfig::default()
            .with_dt(dt)
            .with_steps(total_steps, burn_in_steps)
            .with_chains(n_chains)
            .with_seed(seed);
        cfg.validate()?;
        let e = estimate_fast_moments(&cfg, &p.0)?.cos_y3;
        *out = HeishomEstimate {
            mean: e.mean,
            std_error: e.std_error,
            effective_samples: e.effective_samples,
        };
        Ok(())
    })
}

/// Nodes per axis of the lattice with radius `radius` and spacing `h`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn heishom_grid_nodes_per_axis(
    radius: f64,
    h: f64,
    out: *mut usize,
) -> HeishomStatus {
    guard(|| {
        let cfg = CellConfig {
            radius,
            h,
            ..Default::default()
        };
        *out.as_mut().ok_or_else(null)? = cfg.grid()?.nodes_per_axis();
        Ok(())
    })
}

/// Solves `delta u - L_h u = F` with the default scheme and solver. `f`
/// holds `n^3` node values, first coordinate fastest, where `n` is given
/// by [`heishom_grid_nodes_per_axis`].
///
/// # Safety
/// `params` must be a live handle, `f` must point to `len` doubles and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn heishom_cell_solve(
    params: *const HeishomParams,
    radius: f64,
    h: f64,
    delta: f64,
    f: *const f64,
    len: usize,
    out: *mut *mut HeishomGridFunction,
) -> HeishomStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(null)?;
        if f.is_null() {
            return Err(null());
        }
        let cfg = CellConfig {
            radius,
            h,
            ..Default::default()
        };
        let grid = cfg.grid()?;
        if len != grid.n_nodes() {
            return Err(Failure(
                HeishomStatus::InvalidArgument,
                format!("expected {} values, got {len}", grid.n_nodes()),
            ));
        }
        let source = GridFunction {
            grid,
            values: std::slice::from_raw_parts(f, len).to_vec(),
        };
        let u = solve_cell(delta, &source, &p.0, &cfg)?;
        write_out(out, HeishomGridFunction(u))
    })
}

/// Number of values of a grid function.
///
/// # Safety
/// `gf` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn heishom_grid_function_len(gf: *const HeishomGridFunction) -> usize {
    gf.as_ref().map_or(0, |g| g.0.values.len())
}

/// Value at the origin node.
///
/// # Safety
/// `gf` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn heishom_grid_function_at_origin(
    gf: *const HeishomGridFunction,
    out: *mut f64,
) -> HeishomStatus {
    guard(|| {
        let g = gf.as_ref().ok_or_else(null)?;
        *out.as_mut().ok_or_else(null)? = g.0.at_origin();
        Ok(())
    })
}

/// Copies all values into `buf`, which must hold `len` doubles with `len`
/// equal to [`heishom_grid_function_len`].
///
/// # Safety
/// `gf` must be a live handle and `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn heishom_grid_function_copy(
    gf: *const HeishomGridFunction,
    buf: *mut f64,
    len: usize,
) -> HeishomStatus {
    guard(|| {
        let g = gf.as_ref().ok_or_else(null)?;
        if buf.is_null() {
            return Err(null());
        }
        if len != g.0.values.len() {
            return Err(Failure(
                HeishomStatus::InvalidArgument,
                format!(
                    "buffer holds {len} values, grid function has {}",
                    g.0.values.len()
                ),
            ));
        }
        ptr::copy_nonoverlapping(g.0.values.as_ptr(), buf, len);
        Ok(())
    })
}

/// # Safety
/// `gf` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn heishom_grid_function_free(gf: *mut HeishomGridFunction) {
    free(gf)
}

/// Runs an experiment config (the JSON accepted by the `heishom` binary)
/// into `out_dir`. `all_pass` receives 1 when every check passed, else 0.
///
/// # Safety
/// `config_json` and `out_dir` must be NUL-terminated strings and
/// `all_pass` writable.
#[no_mangle]
pub unsafe extern "C" fn heishom_run_config(
    config_json: *const c_char,
    out_dir: *const c_char,
    all_pass: *mut i32,
) -> HeishomStatus {
    guard(|| {
        let flag = all_pass.as_mut().ok_or_else(null)?;
        let cli_failure = |e: cli::CliError| {
            let status = match e.scope {
                "params" => HeishomStatus::InvalidParams,
                "model" => HeishomStatus::UnknownModel,
                "io" => HeishomStatus::Io,
                "numerics" => HeishomStatus::NumericalBlowup,
                _ => HeishomStatus::Config,
            };
            Failure(status, e.to_string())
        };
        let cfg = cli::parse_config(read_str(config_json)?)
            .and_then(cli::resolve)
            .map_err(cli_failure)?;
        let outcome = cli::run(&cfg, Path::new(read_str(out_dir)?)).map_err(cli_failure)?;
        *flag = outcome.all_pass() as i32;
        Ok(())
    })
}
