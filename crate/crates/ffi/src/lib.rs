//! C interface to `rlp-core`.
//!
//! Every fallible call returns an [`RlpStatus`]; on anything but
//! `RLP_STATUS_OK` the thread-local message from [`rlp_last_error`] says
//! what went wrong. Results that own memory come back as opaque handles that
//! must be released with the matching `*_free` function.
//!
//! Config strings are TOML, or JSON when they start with `{`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rlp_core::experiment::{parse_text, run_config, ExperimentConfig, RunOptions};
use rlp_core::model::{EpisodeSpec, OrderState, RewardProtocol};
use rlp_core::ode::{integrate, rhs, OdeConfig};
use rlp_core::phase::{critical_penalty, find_fixed_points, FixedPointSet, Stability};
use rlp_core::sim::{simulate, SimConfig};
use rlp_core::trajectory::Trajectory;
use rlp_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RlpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// A config value was rejected; the message names the field.
    Validation = 3,
    Parse = 4,
    Domain = 5,
    Runtime = 6,
    Io = 7,
    OutOfRange = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RlpProtocolKind {
    AllCorrect = 0,
    NOrMore = 1,
    Breadcrumb = 2,
    Subtask = 3,
}

/// Flat description of a reward protocol. Fields not used by `kind` are
/// ignored.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct RlpProtocol {
    pub kind: RlpProtocolKind,
    pub eta1: f64,
    /// Penalty rate (all-correct).
    pub eta2: f64,
    /// Threshold (n-or-more).
    pub n: usize,
    /// Per-decision reward (breadcrumb).
    pub beta: f64,
    /// Subtask length and reward (subtask).
    pub t0: usize,
    pub r_sub: f64,
}

impl From<&RlpProtocol> for RewardProtocol {
    fn from(p: &RlpProtocol) -> Self {
        match p.kind {
            RlpProtocolKind::AllCorrect => RewardProtocol::AllCorrect {
                eta1: p.eta1,
                eta2: p.eta2,
            },
            RlpProtocolKind::NOrMore => RewardProtocol::NOrMore { n: p.n, eta1: p.eta1 },
            RlpProtocolKind::Breadcrumb => RewardProtocol::Breadcrumb {
                eta1: p.eta1,
                beta: p.beta,
            },
            RlpProtocolKind::Subtask => RewardProtocol::Subtask {
                t0: p.t0,
                r_sub: p.r_sub,
                eta1: p.eta1,
            },
        }
    }
}

/// One logged row. `empirical_reward` is NaN for ODE trajectories.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct RlpRow {
    pub alpha: f64,
    pub t: f64,
    pub r: f64,
    pub q: f64,
    pub rho: f64,
    pub eps_g: f64,
    pub expected_reward: f64,
    pub empirical_reward: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct RlpFixedPoint {
    pub rho: f64,
    pub stable: bool,
    pub residual: f64,
}

/// Opaque trajectory handle.
pub struct RlpTrajectory(Trajectory);

/// Opaque fixed-point set handle.
pub struct RlpFixedPoints(FixedPointSet);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let mut bytes = msg.into();
    bytes.retain(|&b| b != 0);
    let c = CString::new(bytes).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> RlpStatus {
    match err {
        Error::Validation { .. } => RlpStatus::Validation,
        Error::Parse(_) => RlpStatus::Parse,
        Error::Io(_) => RlpStatus::Io,
        Error::Domain(_) | Error::InvalidState(_) => RlpStatus::Domain,
        _ => RlpStatus::Runtime,
    }
}

struct Fail(RlpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RlpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RlpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RlpStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(RlpStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(RlpStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rlp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the full message length
/// excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rlp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Expected `(dR/dalpha, dQ/dalpha)` at `(r, q)` for episodes of length `t`.
///
/// # Safety
/// `protocol` must point to a valid struct; `dr` and `dq` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rlp_flow(
    r: f64,
    q: f64,
    t: usize,
    protocol: *const RlpProtocol,
    dr: *mut f64,
    dq: *mut f64,
) -> RlpStatus {
    guard(|| {
        let p = protocol.as_ref().ok_or_else(|| null("protocol"))?;
        let dr = out_ptr(dr, "dr")?;
        let dq = out_ptr(dq, "dq")?;
        let spec = EpisodeSpec::new(t);
        let proto = RewardProtocol::from(p);
        spec.validate()?;
        proto.validate(&spec)?;
        let f = rhs(&OrderState::new(r, q)?, &spec, &proto)?;
        *dr = f.dr;
        *dq = f.dq;
        Ok(())
    })
}

/// Integrates the order-parameter ODE described by `config`.
///
/// # Safety
/// `config` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rlp_ode_integrate(config: *const c_char, out: *mut *mut RlpTrajectory) -> RlpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let cfg: OdeConfig = parse_text(text(config, "config")?)?;
        cfg.validate()?;
        *out = Box::into_raw(Box::new(RlpTrajectory(integrate(&cfg)?)));
        Ok(())
    })
}

/// Runs one finite-dimension simulation; `seed` replaces the config's seed.
///
/// # Safety
/// `config` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rlp_simulate(config: *const c_char, seed: u64, out: *mut *mut RlpTrajectory) -> RlpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let mut cfg: SimConfig = parse_text(text(config, "config")?)?;
        cfg.seed = seed;
        cfg.validate()?;
        *out = Box::into_raw(Box::new(RlpTrajectory(simulate(&cfg)?)));
        Ok(())
    })
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rlp_trajectory_len(traj: *const RlpTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.0.rows.len())
}

/// # Safety
/// `traj` must be a live handle and `row` writable.
#[no_mangle]
pub unsafe extern "C" fn rlp_trajectory_row(traj: *const RlpTrajectory, index: usize, row: *mut RlpRow) -> RlpStatus {
    guard(|| {
        let t = traj.as_ref().ok_or_else(|| null("traj"))?;
        let row = out_ptr(row, "row")?;
        let r = t.0.rows.get(index).ok_or_else(|| {
            Fail(RlpStatus::OutOfRange, format!("row {index} of {}", t.0.rows.len()))
        })?;
        *row = RlpRow {
            alpha: r.alpha,
            t: r.t,
            r: r.r,
            q: r.q,
            rho: r.rho,
            eps_g: r.eps_g,
            expected_reward: r.expected_reward,
            empirical_reward: r.empirical_reward.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// # Safety
/// `traj` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rlp_trajectory_free(traj: *mut RlpTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Fixed points of the fixed-norm overlap flow under an all-correct reward
/// with penalty.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rlp_fixed_points(
    t: usize,
    eta1: f64,
    eta2: f64,
    q: f64,
    out: *mut *mut RlpFixedPoints,
) -> RlpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        *out = Box::into_raw(Box::new(RlpFixedPoints(find_fixed_points(t, eta1, eta2, q)?)));
        Ok(())
    })
}

/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rlp_fixed_points_len(set: *const RlpFixedPoints) -> usize {
    set.as_ref().map_or(0, |s| s.0.points.len())
}

/// Points are ordered by increasing `rho`.
///
/// # Safety
/// `set` must be a live handle and `point` writable.
#[no_mangle]
pub unsafe extern "C" fn rlp_fixed_points_get(
    set: *const RlpFixedPoints,
    index: usize,
    point: *mut RlpFixedPoint,
) -> RlpStatus {
    guard(|| {
        let s = set.as_ref().ok_or_else(|| null("set"))?;
        let point = out_ptr(point, "point")?;
        let p = s.0.points.get(index).ok_or_else(|| {
            Fail(RlpStatus::OutOfRange, format!("point {index} of {}", s.0.points.len()))
        })?;
        *point = RlpFixedPoint {
            rho: p.rho,
            stable: p.stability == Stability::Stable,
            residual: p.residual,
        };
        Ok(())
    })
}

/// # Safety
/// `set` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rlp_fixed_points_free(set: *mut RlpFixedPoints) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Smallest penalty at which a second stable fixed point appears.
///
/// # Safety
/// `eta_crit` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rlp_critical_penalty(t: usize, eta1: f64, q: f64, tol: f64, eta_crit: *mut f64) -> RlpStatus {
    guard(|| {
        let dst = out_ptr(eta_crit, "eta_crit")?;
        *dst = critical_penalty(t, eta1, q, tol)?;
        Ok(())
    })
}

/// Runs a full experiment config, as the `rlp` binary does. `output_dir`
/// may be null, in which case the config's own directory setting is used.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `output_dir` must be null
/// or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rlp_run_experiment(
    config_path: *const c_char,
    output_dir: *const c_char,
    seed_offset: u64,
) -> RlpStatus {
    guard(|| {
        let path = PathBuf::from(text(config_path, "config_path")?);
        let output_dir = if output_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(text(output_dir, "output_dir")?))
        };
        let cfg = ExperimentConfig::load(&path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
        let opts = RunOptions { output_dir, seed_offset };
        run_config(cfg, PathBuf::from("out").join(stem), &opts)?;
        Ok(())
    })
}
