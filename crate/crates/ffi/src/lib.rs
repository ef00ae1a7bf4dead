//! C interface: experiments driven by JSON configs, a reusable prediction
//! layer and a receding-horizon controller behind opaque handles.
//!
//! Every function returns a [`KdStatus`]; on failure the message is kept per
//! thread and read back with [`kd_last_error`]. Matrices are passed as
//! column-major `double` buffers. Handles are released with their `_free`
//! function; passing NULL to a `_free` function is a no-op.
//!
//! # Safety
//!
//! Pointers must be NULL or valid for the documented number of elements;
//! strings must be NUL-terminated. Handles must come from the matching
//! constructor and are not thread-safe: use one handle per thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nalgebra::{DMatrix, DVector};

use koopman_deepc::cli::commands::{build_lifting, recorded_dataset};
use koopman_deepc::cli::{cmd_control, cmd_predict, cmd_simulate, cmd_train, ExperimentConfig, RunContext};
use koopman_deepc::control::{ControlProblem, KoopmanController};
use koopman_deepc::data::build_bundle;
use koopman_deepc::qp_layer::{PredictionLayer, QPSolution};
use koopman_deepc::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    DegenerateData = 5,
    Numerical = 6,
    Infeasible = 7,
    Diverged = 8,
    Panic = 9,
}

/// CLI-equivalent commands for [`kd_experiment_run`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdCommand {
    Simulate = 0,
    Train = 1,
    Predict = 2,
    Control = 3,
}

/// Parsed and validated experiment configuration.
pub struct KdExperiment {
    config: ExperimentConfig,
}

/// Prediction QP with a fixed data matrix; caches the last solution for
/// [`kd_prediction_layer_vjp`].
pub struct KdPredictionLayer {
    layer: PredictionLayer,
    last: Option<(DVector<f64>, QPSolution)>,
}

/// Koopman controller built from an experiment's recorded data.
pub struct KdController {
    controller: KoopmanController,
    n_u: usize,
    n_y: usize,
    t_ini: usize,
    horizon: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> KdStatus {
    match err {
        Error::InvalidArgument(_) | Error::Parse { .. } => KdStatus::InvalidArgument,
        Error::Config(_) => KdStatus::Config,
        Error::Io(_) => KdStatus::Io,
        Error::DegenerateData(_) => KdStatus::DegenerateData,
        Error::Numerical(_) | Error::Integration(_) => KdStatus::Numerical,
        Error::Infeasible(_) => KdStatus::Infeasible,
        Error::Diverged { .. } => KdStatus::Diverged,
    }
}

/// Runs `f`, recording errors and caught panics.
fn guard<F>(f: F) -> KdStatus
where
    F: FnOnce() -> Result<(), (KdStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            KdStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            KdStatus::Panic
        }
    }
}

fn lib<T>(r: koopman_deepc::Result<T>) -> Result<T, (KdStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (KdStatus, String) {
    (KdStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (KdStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (KdStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (KdStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (KdStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn bad(msg: impl Into<String>) -> (KdStatus, String) {
    (KdStatus::InvalidArgument, msg.into())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated)
/// and returns its length without the terminator, 0 when the last call
/// succeeded. Nothing is written unless `len` exceeds that length, so `buf`
/// may be NULL to query it.
#[no_mangle]
pub unsafe extern "C" fn kd_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len >= bytes.len() {
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, bytes.len());
        }
        bytes.len() - 1
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------------------
// experiments

/// Parses and validates a JSON experiment config.
#[no_mangle]
pub unsafe extern "C" fn kd_experiment_from_json(json: *const c_char, out: *mut *mut KdExperiment) -> KdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let config = lib(ExperimentConfig::from_json(text(json, "json")?))?;
        *out = Box::into_raw(Box::new(KdExperiment { config }));
        Ok(())
    })
}

/// Loads a config file; relative data and checkpoint paths resolve against
/// the file's directory.
#[no_mangle]
pub unsafe extern "C" fn kd_experiment_load(path: *const c_char, out: *mut *mut KdExperiment) -> KdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let config = lib(ExperimentConfig::load(text(path, "path")?))?;
        *out = Box::into_raw(Box::new(KdExperiment { config }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_experiment_free(exp: *mut KdExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

#[no_mangle]
pub unsafe extern "C" fn kd_experiment_set_seed(exp: *mut KdExperiment, seed: u64) -> KdStatus {
    guard(|| {
        let exp = exp.as_mut().ok_or_else(|| null("experiment"))?;
        exp.config.seed = seed;
        Ok(())
    })
}

/// Runs a command, writing its files into `out_dir` exactly as the CLI does.
#[no_mangle]
pub unsafe extern "C" fn kd_experiment_run(exp: *const KdExperiment, command: KdCommand, out_dir: *const c_char) -> KdStatus {
    guard(|| {
        let exp = exp.as_ref().ok_or_else(|| null("experiment"))?;
        let ctx = lib(RunContext::new(PathBuf::from(text(out_dir, "out_dir")?), false))?;
        let cfg = &exp.config;
        lib(cfg.save(ctx.path("config.json")))?;
        match command {
            KdCommand::Simulate => lib(cmd_simulate(cfg, &ctx)).map(drop),
            KdCommand::Train => lib(cmd_train(cfg, &ctx)).map(drop),
            KdCommand::Predict => lib(cmd_predict(cfg, &ctx)).map(drop),
            KdCommand::Control => lib(cmd_control(cfg, &ctx)).map(drop),
        }
    })
}

// ---------------------------------------------------------------------------
// prediction layer

/// Builds `min lambda_g |g|^2 + lambda_y |Z g - z|^2 s.t. U g = e` with
/// `Z` (`n_z x n_c`) and `U` (`n_e x n_c`) fixed.
#[no_mangle]
pub unsafe extern "C" fn kd_prediction_layer_new(
    z_mat: *const f64,
    n_z: usize,
    n_c: usize,
    u_mat: *const f64,
    n_e: usize,
    lambda_g: f64,
    lambda_y: f64,
    out: *mut *mut KdPredictionLayer,
) -> KdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let z = DMatrix::from_column_slice(n_z, n_c, slice(z_mat, n_z * n_c, "z_mat")?);
        let u = DMatrix::from_column_slice(n_e, n_c, slice(u_mat, n_e * n_c, "u_mat")?);
        let layer = lib(PredictionLayer::new(&z, &u, lambda_g, lambda_y))?;
        *out = Box::into_raw(Box::new(KdPredictionLayer { layer, last: None }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_prediction_layer_free(layer: *mut KdPredictionLayer) {
    if !layer.is_null() {
        drop(Box::from_raw(layer));
    }
}

/// Solves for `g` (`n_c` entries). `kkt_residual` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn kd_prediction_layer_solve(
    layer: *mut KdPredictionLayer,
    z_vec: *const f64,
    e_vec: *const f64,
    g_out: *mut f64,
    kkt_residual: *mut f64,
) -> KdStatus {
    guard(|| {
        let layer = layer.as_mut().ok_or_else(|| null("layer"))?;
        let z_mat = layer.layer.z_mat();
        let (n_z, n_c) = z_mat.shape();
        let n_e = layer.layer.n_constraints();
        let z = DVector::from_column_slice(slice(z_vec, n_z, "z_vec")?);
        let e = DVector::from_column_slice(slice(e_vec, n_e, "e_vec")?);
        let sol = lib(layer.layer.solve(&z, &e))?;
        slice_mut(g_out, n_c, "g_out")?.copy_from_slice(sol.primal.as_slice());
        if !kkt_residual.is_null() {
            *kkt_residual = sol.kkt_residual;
        }
        layer.last = Some((z, sol));
        Ok(())
    })
}

/// Cotangents of `gbar' g` at the last solution with respect to `Z`
/// (`n_z x n_c`), `z` and `e`. Any output pointer may be NULL to skip it.
#[no_mangle]
pub unsafe extern "C" fn kd_prediction_layer_vjp(
    layer: *const KdPredictionLayer,
    gbar: *const f64,
    d_z_mat: *mut f64,
    d_z_vec: *mut f64,
    d_e_vec: *mut f64,
) -> KdStatus {
    guard(|| {
        let layer = layer.as_ref().ok_or_else(|| null("layer"))?;
        let (z, sol) = layer.last.as_ref().ok_or_else(|| bad("no solution yet; call kd_prediction_layer_solve first"))?;
        let (n_z, n_c) = layer.layer.z_mat().shape();
        let gbar = DVector::from_column_slice(slice(gbar, n_c, "gbar")?);
        let grads = lib(layer.layer.vjp(z, sol, &gbar))?;
        if !d_z_mat.is_null() {
            slice_mut(d_z_mat, n_z * n_c, "d_z_mat")?.copy_from_slice(grads.d_z_mat.as_slice());
        }
        if !d_z_vec.is_null() {
            slice_mut(d_z_vec, n_z, "d_z_vec")?.copy_from_slice(grads.d_z_vec.as_slice());
        }
        if !d_e_vec.is_null() {
            slice_mut(d_e_vec, grads.d_e.len(), "d_e_vec")?.copy_from_slice(grads.d_e.as_slice());
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// controller

/// Builds the Koopman controller of an experiment from its recorded data.
/// Network lifts read their checkpoint from `model_dir` (or the configured
/// path); `model_dir` may be NULL for analytic lifts.
#[no_mangle]
pub unsafe extern "C" fn kd_controller_new(
    exp: *const KdExperiment,
    model_dir: *const c_char,
    out: *mut *mut KdController,
) -> KdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = &exp.as_ref().ok_or_else(|| null("experiment"))?.config;
        let c = cfg.control.as_ref().ok_or_else(|| (KdStatus::Config, "control: section missing".to_string()))?;
        let dir = if model_dir.is_null() { PathBuf::from(".") } else { PathBuf::from(text(model_dir, "model_dir")?) };
        let ctx = RunContext { out: dir, timing: false };
        let plant = lib(cfg.plant())?;
        let spec = lib(cfg.control_spec(&plant))?;
        let lifting = lib(build_lifting(cfg, &ctx, &plant))?;
        let ds = lib(recorded_dataset(cfg))?;
        let b = &cfg.bundle;
        let bundle = lib(build_bundle(&ds, b.t_ini, b.horizon, b.kind, Some(lifting.dim())))?;
        let problem = ControlProblem { bundle, lifting, spec, lambda_g: c.lambda_g, lambda_y: c.lambda_y };
        let controller = lib(KoopmanController::new(problem))?;
        *out = Box::into_raw(Box::new(KdController {
            controller,
            n_u: plant.n_u(),
            n_y: plant.n_y(),
            t_ini: b.t_ini,
            horizon: b.horizon,
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_controller_free(ctrl: *mut KdController) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}

/// Writes `n_u`, `n_y`, `T_ini` and the horizon `N`; any pointer may be NULL.
#[no_mangle]
pub unsafe extern "C" fn kd_controller_dims(
    ctrl: *const KdController,
    n_u: *mut usize,
    n_y: *mut usize,
    t_ini: *mut usize,
    horizon: *mut usize,
) -> KdStatus {
    guard(|| {
        let c = ctrl.as_ref().ok_or_else(|| null("controller"))?;
        for (p, v) in [(n_u, c.n_u), (n_y, c.n_y), (t_ini, c.t_ini), (horizon, c.horizon)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Plans from the histories `u_ini` (`n_u x T_ini`) and `y_ini`
/// (`n_y x T_ini`) at step `t`. Writes the input plan (`n_u x N`) and the
/// planned outputs (`n_y x N`, may be NULL). With `soft` the output box is
/// relaxed by penalized slack. Returns `KD_STATUS_INFEASIBLE` when the hard
/// problem has no solution.
#[no_mangle]
pub unsafe extern "C" fn kd_controller_plan(
    ctrl: *mut KdController,
    u_ini: *const f64,
    y_ini: *const f64,
    t: usize,
    soft: bool,
    u_plan: *mut f64,
    y_plan: *mut f64,
) -> KdStatus {
    guard(|| {
        let c = ctrl.as_mut().ok_or_else(|| null("controller"))?;
        let u = DMatrix::from_column_slice(c.n_u, c.t_ini, slice(u_ini, c.n_u * c.t_ini, "u_ini")?);
        let y = DMatrix::from_column_slice(c.n_y, c.t_ini, slice(y_ini, c.n_y * c.t_ini, "y_ini")?);
        let plan = lib(c.controller.solve_control_step(&u, &y, t, soft))?;
        slice_mut(u_plan, c.n_u * c.horizon, "u_plan")?.copy_from_slice(plan.u.as_slice());
        if !y_plan.is_null() {
            slice_mut(y_plan, c.n_y * c.horizon, "y_plan")?.copy_from_slice(plan.y.as_slice());
        }
        Ok(())
    })
}
