//! C ABI for simwave.
//!
//! Every fallible call returns a [`SimwaveStatus`]; on failure the message is
//! kept per thread and can be fetched with [`simwave_last_error_message`].
//! Handles are opaque and must be released with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use simwave::em::{self_impedance, AntennaParams};
use simwave::harness::{goodput, run_once, GoodputParams, RunConfig, RunOutcome};
use simwave::optimizer::water_fill;
use simwave::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimwaveStatus {
    Ok = 0,
    NullPointer = 1,
    /// Invalid configuration or argument.
    Config = 2,
    /// The model or optimiser failed numerically.
    Numerical = 3,
    /// The output buffer is shorter than required.
    BufferTooSmall = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// Parsed configuration (scenario, optimiser and goodput settings).
pub struct SimwaveScenario {
    config: RunConfig,
}

/// Outcome of one optimisation.
pub struct SimwaveResult {
    outcome: RunOutcome,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> SimwaveStatus {
    set_error(e.to_string());
    if e.is_config() {
        SimwaveStatus::Config
    } else {
        SimwaveStatus::Numerical
    }
}

fn guarded(f: impl FnOnce() -> SimwaveStatus) -> SimwaveStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            SimwaveStatus::Panic
        }
    }
}

fn null(what: &str) -> SimwaveStatus {
    set_error(format!("{what} is null"));
    SimwaveStatus::NullPointer
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn simwave_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Parse a TOML configuration into a new scenario handle.
///
/// # Safety
/// `toml` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn simwave_scenario_from_toml(toml: *const c_char, out: *mut *mut SimwaveScenario) -> SimwaveStatus {
    guarded(|| {
        if toml.is_null() {
            return null("toml");
        }
        if out.is_null() {
            return null("out");
        }
        let text = match CStr::from_ptr(toml).to_str() {
            Ok(t) => t,
            Err(_) => {
                set_error("configuration is not valid UTF-8");
                return SimwaveStatus::Config;
            }
        };
        match RunConfig::from_toml(text) {
            Ok(config) => {
                *out = Box::into_raw(Box::new(SimwaveScenario { config }));
                SimwaveStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// # Safety
/// `scenario` must be null or a handle from [`simwave_scenario_from_toml`]
/// that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn simwave_scenario_free(scenario: *mut SimwaveScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Draw users with `seed` and run the alternating optimisation.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn simwave_optimize(
    scenario: *const SimwaveScenario,
    seed: u64,
    out: *mut *mut SimwaveResult,
) -> SimwaveStatus {
    guarded(|| {
        if scenario.is_null() {
            return null("scenario");
        }
        if out.is_null() {
            return null("out");
        }
        let cfg = &(*scenario).config;
        match run_once(&cfg.scenario, &cfg.optimizer, &cfg.goodput, seed, 0) {
            Ok(outcome) => {
                *out = Box::into_raw(Box::new(SimwaveResult { outcome }));
                SimwaveStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// # Safety
/// `result` must be null or a handle from [`simwave_optimize`] that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn simwave_result_free(result: *mut SimwaveResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Spectral efficiency (bit/s/Hz) on the evaluation grid.
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn simwave_result_spectral_efficiency(result: *const SimwaveResult) -> f64 {
    if result.is_null() {
        return f64::NAN;
    }
    (*result).outcome.spectral_efficiency
}

/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn simwave_result_goodput(result: *const SimwaveResult) -> f64 {
    if result.is_null() {
        return f64::NAN;
    }
    (*result).outcome.goodput
}

/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn simwave_result_outer_iterations(result: *const SimwaveResult) -> usize {
    if result.is_null() {
        return 0;
    }
    (*result).outcome.state.outer_iters
}

/// Copy the optimised phases (layer-major) into `buf`. `len` holds the buffer
/// length on entry and the number of phases on return.
///
/// # Safety
/// `result` must be a live handle, `len` valid, and `buf` null or `*len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn simwave_result_phases(result: *const SimwaveResult, buf: *mut f64, len: *mut usize) -> SimwaveStatus {
    guarded(|| {
        if result.is_null() {
            return null("result");
        }
        if len.is_null() {
            return null("len");
        }
        let phases = &(*result).outcome.state.phases.phases;
        let capacity = *len;
        *len = phases.len();
        if capacity < phases.len() || buf.is_null() {
            set_error(format!("need {} entries", phases.len()));
            return SimwaveStatus::BufferTooSmall;
        }
        ptr::copy_nonoverlapping(phases.as_ptr(), buf, phases.len());
        SimwaveStatus::Ok
    })
}

/// Self-impedance of a TM1 antenna at `frequency` Hz.
///
/// # Safety
/// `re` and `im` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn simwave_self_impedance(
    frequency: f64,
    radius: f64,
    radiation_resistance: f64,
    re: *mut f64,
    im: *mut f64,
) -> SimwaveStatus {
    guarded(|| {
        if re.is_null() || im.is_null() {
            return null("output");
        }
        let ant = AntennaParams {
            radius,
            radiation_resistance,
            ..AntennaParams::default()
        };
        if let Err(e) = ant.validate() {
            return status_of(&e);
        }
        match self_impedance(frequency, &ant) {
            Ok(z) => {
                *re = z.re;
                *im = z.im;
                SimwaveStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Water-filling of `total` over `n` gains into `powers`.
///
/// # Safety
/// `gains` and `powers` must point to `n` doubles; `water_level` may be null.
#[no_mangle]
pub unsafe extern "C" fn simwave_water_fill(
    gains: *const f64,
    n: usize,
    total: f64,
    powers: *mut f64,
    water_level: *mut f64,
) -> SimwaveStatus {
    guarded(|| {
        if n > 0 && (gains.is_null() || powers.is_null()) {
            return null("gains or powers");
        }
        if !(total >= 0.0) {
            set_error(format!("total power must be >= 0, got {total}"));
            return SimwaveStatus::Config;
        }
        let g = if n == 0 { &[][..] } else { std::slice::from_raw_parts(gains, n) };
        if g.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            set_error("gains must be finite and >= 0");
            return SimwaveStatus::Config;
        }
        let wf = water_fill(g, total);
        if n > 0 {
            ptr::copy_nonoverlapping(wf.powers.as_ptr(), powers, n);
        }
        if !water_level.is_null() {
            *water_level = wf.water_level;
        }
        SimwaveStatus::Ok
    })
}

/// Rate after control overhead for `updated` signalled elements.
#[no_mangle]
pub extern "C" fn simwave_goodput(
    rate: f64,
    updated: usize,
    bits_per_element: u32,
    control_spectral_efficiency: f64,
    symbols_per_slot: u32,
) -> f64 {
    let params = GoodputParams {
        bits_per_element,
        control_spectral_efficiency,
        symbols_per_slot,
    };
    if params.validate().is_err() {
        set_error("invalid goodput parameters");
        return f64::NAN;
    }
    goodput(rate, updated, &params)
}
