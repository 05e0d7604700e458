//! C ABI over `subgoal-ds`: load trained models, query their vector field and
//! drive a cascade controller from a host control loop.
//!
//! Every fallible function returns an [`SdsStatus`]; on failure the message is
//! available from [`sds_last_error`] on the same thread. Handles are opaque and
//! must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use subgoal_ds::controller::{CascadeController, DEFAULT_DELTA};
use subgoal_ds::data::{load_demonstration, Demonstration, Gripper};
use subgoal_ds::policy::{load_model, TrainedModel, TrainedPolicy};
use subgoal_ds::segment::segment_by_gripper;
use subgoal_ds::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Numeric = 6,
    Unsupported = 7,
    Panic = 8,
}

/// A trained segment policy.
pub struct SdsModel {
    inner: TrainedModel,
}

/// A cascade of segment policies with its switching state.
pub struct SdsController {
    inner: CascadeController,
}

/// A loaded demonstration.
pub struct SdsDemo {
    inner: Demonstration,
}

/// Result of one controller step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SdsStepInfo {
    /// -1: no gripper command this step, 0: open, 1: close.
    pub gripper_command: i32,
    pub active_segment: usize,
    /// 1 when a subgoal was attained on this step.
    pub segment_completed: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> SdsStatus {
    match err {
        Error::Io { .. } => SdsStatus::Io,
        Error::Parse { .. } | Error::Model(_) => SdsStatus::Parse,
        Error::Validation(_)
        | Error::DegenerateSegment(_)
        | Error::Waypoint(_)
        | Error::NonUnitQuaternion { .. } => SdsStatus::Validation,
        Error::Divergence { .. } | Error::NonFiniteLoss { .. } => SdsStatus::Numeric,
        Error::UnsupportedSecondDerivative { .. } => SdsStatus::Unsupported,
        _ => SdsStatus::InvalidArgument,
    }
}

fn fail(status: SdsStatus, msg: impl Into<String>) -> SdsStatus {
    set_error(msg);
    status
}

fn from_err(err: Error) -> SdsStatus {
    let status = status_of(&err);
    fail(status, err.to_string())
}

/// Runs `f`, turning panics into `SdsStatus::Panic`.
fn guard(f: impl FnOnce() -> SdsStatus) -> SdsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == SdsStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(SdsStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, SdsStatus> {
    if path.is_null() {
        return Err(fail(SdsStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(SdsStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], SdsStatus> {
    if p.is_null() {
        return Err(fail(SdsStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn sds_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sds_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sds_model_load(path: *const c_char, out: *mut *mut SdsModel) -> SdsStatus {
    guard(|| {
        if out.is_null() {
            return fail(SdsStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = try_ffi!(path_arg(path));
        match load_model(path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(SdsModel { inner: m }));
                SdsStatus::Ok
            }
            Err(e) => from_err(e),
        }
    })
}

/// # Safety
/// `model` must be null or a handle from [`sds_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sds_model_free(model: *mut SdsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// State dimension of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sds_model_dim(model: *const SdsModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.policy.dim())
}

/// Commanded world velocity at world position `x`, speed cap applied.
///
/// # Safety
/// `x` and `out` must point to `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn sds_model_velocity(
    model: *const SdsModel,
    x: *const f64,
    dim: usize,
    out: *mut f64,
) -> SdsStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(SdsStatus::NullPointer, "model is null");
        };
        if out.is_null() {
            return fail(SdsStatus::NullPointer, "out is null");
        }
        if dim != m.inner.policy.dim() {
            return fail(
                SdsStatus::InvalidArgument,
                format!("dim {dim} does not match model dim {}", m.inner.policy.dim()),
            );
        }
        let x = try_ffi!(slice_arg(x, dim, "x"));
        match m.inner.command(x) {
            Ok(v) => {
                std::slice::from_raw_parts_mut(out, dim).copy_from_slice(&v);
                SdsStatus::Ok
            }
            Err(e) => from_err(e),
        }
    })
}

/// Lyapunov value at world position `x`. Fails with `Unsupported` for BC
/// models, which have none.
///
/// # Safety
/// `x` must point to `dim` doubles and `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn sds_model_lyapunov(
    model: *const SdsModel,
    x: *const f64,
    dim: usize,
    out: *mut f64,
) -> SdsStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(SdsStatus::NullPointer, "model is null");
        };
        if out.is_null() {
            return fail(SdsStatus::NullPointer, "out is null");
        }
        let TrainedPolicy::Stable(p) = &m.inner.policy else {
            return fail(SdsStatus::Unsupported, "bc models have no Lyapunov function");
        };
        if dim != p.dim() {
            return fail(
                SdsStatus::InvalidArgument,
                format!("dim {dim} does not match model dim {}", p.dim()),
            );
        }
        let x = try_ffi!(slice_arg(x, dim, "x"));
        match p.frame.point_to_frame(x) {
            Ok(xf) => {
                *out = p.lyapunov.value(&xf);
                SdsStatus::Ok
            }
            Err(e) => from_err(e),
        }
    })
}

/// Builds a controller over `count` models. Subgoal `k` occupies
/// `subgoals[k*dim .. (k+1)*dim]`; `gripper_actions[k]` is 0 (open) or 1
/// (close). `delta <= 0` selects the default attainment radius. The models are
/// copied, so the caller keeps ownership of the handles.
///
/// # Safety
/// `models` must point to `count` live handles, `subgoals` to `count * dim`
/// doubles and `gripper_actions` to `count` bytes.
#[no_mangle]
pub unsafe extern "C" fn sds_controller_new(
    models: *const *const SdsModel,
    count: usize,
    subgoals: *const f64,
    dim: usize,
    gripper_actions: *const u8,
    delta: f64,
    out: *mut *mut SdsController,
) -> SdsStatus {
    guard(|| {
        if out.is_null() {
            return fail(SdsStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        if models.is_null() || gripper_actions.is_null() {
            return fail(SdsStatus::NullPointer, "models or gripper_actions is null");
        }
        if count == 0 || dim == 0 {
            return fail(SdsStatus::InvalidArgument, "count and dim must be positive");
        }
        let mut policies = Vec::with_capacity(count);
        for &h in std::slice::from_raw_parts(models, count) {
            match h.as_ref() {
                Some(m) => policies.push(m.inner.clone()),
                None => return fail(SdsStatus::NullPointer, "model handle is null"),
            }
        }
        let flat = try_ffi!(slice_arg(subgoals, count * dim, "subgoals"));
        let goals: Vec<Vec<f64>> = flat.chunks(dim).map(<[f64]>::to_vec).collect();
        let mut grippers = Vec::with_capacity(count);
        for &g in std::slice::from_raw_parts(gripper_actions, count) {
            match Gripper::from_flag(g) {
                Ok(g) => grippers.push(g),
                Err(e) => return from_err(e),
            }
        }
        let delta = if delta > 0.0 { delta } else { DEFAULT_DELTA };
        match CascadeController::new(policies, goals, grippers).and_then(|c| c.with_delta(delta)) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(SdsController { inner: c }));
                SdsStatus::Ok
            }
            Err(e) => from_err(e),
        }
    })
}

/// # Safety
/// `ctrl` must be null or a handle from [`sds_controller_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sds_controller_free(ctrl: *mut SdsController) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}

/// One control step at observed position `x`. `t_in_segment` is the fraction
/// of the active segment's demonstrated duration elapsed, used only for the
/// orientation schedule. Writes the velocity to `velocity_out`.
///
/// # Safety
/// `x` and `velocity_out` must point to `dim` doubles; `info` may be null.
#[no_mangle]
pub unsafe extern "C" fn sds_controller_step(
    ctrl: *mut SdsController,
    x: *const f64,
    dim: usize,
    t_in_segment: f64,
    velocity_out: *mut f64,
    info: *mut SdsStepInfo,
) -> SdsStatus {
    guard(|| {
        let Some(c) = ctrl.as_mut() else {
            return fail(SdsStatus::NullPointer, "controller is null");
        };
        if velocity_out.is_null() {
            return fail(SdsStatus::NullPointer, "velocity_out is null");
        }
        if dim != c.inner.dim() {
            return fail(
                SdsStatus::InvalidArgument,
                format!("dim {dim} does not match controller dim {}", c.inner.dim()),
            );
        }
        let x = try_ffi!(slice_arg(x, dim, "x"));
        match c.inner.step(x, t_in_segment) {
            Ok(o) => {
                std::slice::from_raw_parts_mut(velocity_out, dim).copy_from_slice(&o.velocity);
                if let Some(info) = info.as_mut() {
                    *info = SdsStepInfo {
                        gripper_command: o.gripper_command.map_or(-1, |g| g.flag() as i32),
                        active_segment: o.active_segment,
                        segment_completed: o.segment_completed as i32,
                    };
                }
                SdsStatus::Ok
            }
            Err(e) => from_err(e),
        }
    })
}

/// Seconds the caller holds each command. When positive, stable policies
/// command the displacement of their flow over that period so `v` falls on
/// every held step. `0` turns this off and returns the raw field.
///
/// # Safety
/// `ctrl` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sds_controller_set_period(ctrl: *mut SdsController, dt: f64) -> SdsStatus {
    guard(|| {
        let Some(c) = ctrl.as_mut() else {
            return fail(SdsStatus::NullPointer, "controller is null");
        };
        let period = if dt == 0.0 { None } else { Some(dt) };
        match c.inner.set_control_period(period) {
            Ok(()) => SdsStatus::Ok,
            Err(e) => from_err(e),
        }
    })
}

/// Index of the policy currently in control, or `usize::MAX` for null.
///
/// # Safety
/// `ctrl` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sds_controller_active(ctrl: *const SdsController) -> usize {
    ctrl.as_ref().map_or(usize::MAX, |c| c.inner.active_index())
}

/// Returns control to the first segment.
///
/// # Safety
/// `ctrl` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sds_controller_reset(ctrl: *mut SdsController) {
    if let Some(c) = ctrl.as_mut() {
        c.inner.reset();
    }
}

/// Loads a demonstration JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sds_demo_load(path: *const c_char, out: *mut *mut SdsDemo) -> SdsStatus {
    guard(|| {
        if out.is_null() {
            return fail(SdsStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = try_ffi!(path_arg(path));
        match load_demonstration(path) {
            Ok(d) => {
                *out = Box::into_raw(Box::new(SdsDemo { inner: d }));
                SdsStatus::Ok
            }
            Err(e) => from_err(e),
        }
    })
}

/// # Safety
/// `demo` must be null or a handle from [`sds_demo_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sds_demo_free(demo: *mut SdsDemo) {
    if !demo.is_null() {
        drop(Box::from_raw(demo));
    }
}

/// Number of samples, or 0 for null.
///
/// # Safety
/// `demo` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sds_demo_len(demo: *const SdsDemo) -> usize {
    demo.as_ref().map_or(0, |d| d.inner.len())
}

/// State dimension, or 0 for null.
///
/// # Safety
/// `demo` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sds_demo_dim(demo: *const SdsDemo) -> usize {
    demo.as_ref().map_or(0, |d| d.inner.dim())
}

/// Segments the demonstration at gripper events. Writes the number of
/// segments to `count` and, when `subgoals` is non-null, the subgoals to
/// `subgoals[k*dim ..]` for as many as fit in `capacity` segments.
///
/// # Safety
/// `subgoals` must be null or point to `capacity * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn sds_demo_segment(
    demo: *const SdsDemo,
    subgoals: *mut f64,
    capacity: usize,
    count: *mut usize,
) -> SdsStatus {
    guard(|| {
        let Some(d) = demo.as_ref() else {
            return fail(SdsStatus::NullPointer, "demo is null");
        };
        if count.is_null() {
            return fail(SdsStatus::NullPointer, "count is null");
        }
        let seg = segment_by_gripper(&d.inner);
        *count = seg.len();
        if !subgoals.is_null() {
            let dim = d.inner.dim();
            let out = std::slice::from_raw_parts_mut(subgoals, capacity * dim);
            for (k, g) in seg.subgoals.iter().take(capacity).enumerate() {
                out[k * dim..(k + 1) * dim].copy_from_slice(g);
            }
        }
        SdsStatus::Ok
    })
}
