//! C ABI over the blockfed simulator.
//!
//! Handles are opaque heap pointers owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns a [`BfStatus`]; on
//! anything other than `BF_STATUS_OK` a description is available from
//! [`bf_last_error`] on the same thread until the next failing call.
//! Strings handed out by the library are NUL-terminated UTF-8 and must be
//! released with [`bf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use blockfed::config::ExperimentConfig;
use blockfed::kernel::{self, KernelConfig};
use blockfed::memory;
use blockfed::sim::Simulation;
use blockfed::{Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Malformed or out-of-range configuration.
    Config = 3,
    /// Unreadable or inconsistent dataset.
    Dataset = 4,
    /// Local training produced a non-finite loss.
    Diverged = 5,
    /// No client could afford the current stage.
    NoEligibleClients = 6,
    /// Every configured round has already run.
    Finished = 7,
    /// Shape or value errors in numeric helpers.
    InvalidInput = 8,
    /// Any other library error.
    Internal = 9,
    /// A panic was caught at the boundary; the handle should be discarded.
    Panic = 10,
}

/// Kernel choice for [`bf_nhsic`], passed as its integer value.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfKernel {
    Linear = 0,
    /// Gaussian with the median pairwise distance as bandwidth.
    GaussianMedian = 1,
}

/// Opaque experiment configuration.
pub struct BfConfig(ExperimentConfig);

/// Opaque running simulation.
pub struct BfSimulation(Simulation);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', "\u{fffd}");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> BfStatus {
    match e {
        Error::Round { source, .. } => status_of(source),
        Error::Config(_) | Error::Partition { .. } | Error::Model(_) => BfStatus::Config,
        Error::Dataset(_) | Error::Io(_) => BfStatus::Dataset,
        Error::Diverged { .. } => BfStatus::Diverged,
        Error::EmptyEligiblePool { .. } => BfStatus::NoEligibleClients,
        Error::Shape { .. } | Error::InvalidTensor(_) | Error::BatchTooSmall { .. } | Error::NonFinite { .. } => {
            BfStatus::InvalidInput
        }
        _ => BfStatus::Internal,
    }
}

struct Failure(BfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `body`, translating errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> BfStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => BfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            BfStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(BfStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(BfStatus::InvalidUtf8, format!("`{what}`: {e}")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|e| Failure(BfStatus::Internal, e.to_string()))?;
    write_out(out, c.into_raw(), "out")
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string(v).map_err(|e| Failure(BfStatus::Internal, e.to_string()))
}

/// Message describing the last failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn bf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn bf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// The built-in desk-scale configuration.
#[no_mangle]
pub extern "C" fn bf_config_default() -> *mut BfConfig {
    Box::into_raw(Box::new(BfConfig(ExperimentConfig::desk_default())))
}

/// Parses and validates a JSON configuration into `*out`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_config_from_json(json: *const c_char, out: *mut *mut BfConfig) -> BfStatus {
    guard(|| {
        let text = read_str(json, "json")?;
        let cfg = ExperimentConfig::from_json(text)?;
        cfg.validate()?;
        write_out(out, Box::into_raw(Box::new(BfConfig(cfg))), "out")
    })
}

/// Serializes `cfg` as pretty JSON into `*out`.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_config_to_json(cfg: *const BfConfig, out: *mut *mut c_char) -> BfStatus {
    guard(|| {
        let cfg = deref(cfg, "cfg")?;
        write_string(out, cfg.0.to_json())
    })
}

/// Overrides the experiment seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bf_config_set_seed(cfg: *mut BfConfig, seed: u64) -> BfStatus {
    guard(|| {
        deref_mut(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

/// Releases a configuration. Null is ignored.
///
/// # Safety
/// `cfg` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn bf_config_free(cfg: *mut BfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Builds data, clients and the initial model. `threads == 0` picks the
/// core count. The simulation keeps its own copy of the configuration.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_simulation_new(
    cfg: *const BfConfig,
    threads: usize,
    out: *mut *mut BfSimulation,
) -> BfStatus {
    guard(|| {
        let cfg = deref(cfg, "cfg")?;
        let sim = Simulation::new(&cfg.0, threads)?;
        write_out(out, Box::into_raw(Box::new(BfSimulation(sim))), "out")
    })
}

/// Rounds completed so far.
///
/// # Safety
/// `sim` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn bf_simulation_round(sim: *const BfSimulation) -> usize {
    sim.as_ref().map_or(0, |s| s.0.round())
}

/// Configured number of rounds.
///
/// # Safety
/// `sim` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn bf_simulation_rounds(sim: *const BfSimulation) -> usize {
    sim.as_ref().map_or(0, |s| s.0.plan().rounds)
}

/// Runs one round; `*out` receives its metrics as a JSON object.
/// Returns `BF_STATUS_FINISHED` once every round has run.
///
/// # Safety
/// `sim` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_simulation_step(sim: *mut BfSimulation, out: *mut *mut c_char) -> BfStatus {
    guard(|| {
        let sim = &mut deref_mut(sim, "sim")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        if sim.round() >= sim.plan().rounds {
            return Err(Failure(
                BfStatus::Finished,
                format!("all {} rounds have run", sim.plan().rounds),
            ));
        }
        let m = sim.step()?;
        write_string(out, to_json(&m)?)
    })
}

/// Runs the remaining rounds; `*out` receives a JSON array of their metrics.
///
/// # Safety
/// `sim` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_simulation_run(sim: *mut BfSimulation, out: *mut *mut c_char) -> BfStatus {
    guard(|| {
        let sim = &mut deref_mut(sim, "sim")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let all = sim.run()?;
        write_string(out, to_json(&all)?)
    })
}

/// Drains the warnings recorded so far as a JSON array.
///
/// # Safety
/// `sim` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_simulation_take_warnings(sim: *mut BfSimulation, out: *mut *mut c_char) -> BfStatus {
    guard(|| {
        let sim = &mut deref_mut(sim, "sim")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        write_string(out, to_json(&sim.take_warnings())?)
    })
}

/// Analytic per-stage memory of the simulation's partition as JSON: the full
/// reference plus one entry per stage.
///
/// # Safety
/// `sim` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_simulation_mem_report(sim: *const BfSimulation, out: *mut *mut c_char) -> BfStatus {
    guard(|| {
        let sim = &deref(sim, "sim")?.0;
        let r = memory::reduction_report(
            sim.spec(),
            sim.partition(),
            &sim.stage_options(),
            sim.local_config().batch_size,
        )?;
        write_string(out, to_json(&r)?)
    })
}

/// Releases a simulation. Null is ignored.
///
/// # Safety
/// `sim` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn bf_simulation_free(sim: *mut BfSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

fn kernel_config(k: u32) -> Result<KernelConfig, Failure> {
    match k {
        k if k == BfKernel::Linear as u32 => Ok(KernelConfig::linear()),
        k if k == BfKernel::GaussianMedian as u32 => Ok(KernelConfig::gaussian_median()),
        k => Err(Failure(BfStatus::InvalidInput, format!("unknown kernel {k}"))),
    }
}

/// Normalized HSIC between the rows of `x` (`m × dx`) and `y` (`m × dy`),
/// both row-major. `kernel_x` and `kernel_y` take [`BfKernel`] values.
///
/// # Safety
/// `x` must point to `m·dx` doubles, `y` to `m·dy` doubles, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_nhsic(
    x: *const f64,
    y: *const f64,
    m: usize,
    dx: usize,
    dy: usize,
    kernel_x: u32,
    kernel_y: u32,
    out: *mut f64,
) -> BfStatus {
    guard(|| {
        if x.is_null() {
            return Err(null("x"));
        }
        if y.is_null() {
            return Err(null("y"));
        }
        let xs = std::slice::from_raw_parts(x, m * dx).to_vec();
        let ys = std::slice::from_raw_parts(y, m * dy).to_vec();
        let (v, _) = kernel::nhsic_value(
            &Tensor::new(vec![m, dx], xs)?,
            &kernel_config(kernel_x)?,
            &Tensor::new(vec![m, dy], ys)?,
            &kernel_config(kernel_y)?,
        )?;
        write_out(out, v, "out")
    })
}
