//! C ABI over the simulator.
//!
//! Every fallible call returns an [`MrsimStatus`]; on failure the message is
//! available from [`mrsim_last_error_message`] on the same thread. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use mrsim::analysis::{self, ClientClass, ModeRun, ModeSelect, ScenarioConfig};
use mrsim::replication::Mode;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrsimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Simulation = 4,
    OutOfRange = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrsimMode {
    Chain = 0,
    Mirrored = 1,
    Both = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrsimClientClass {
    Outside = 0,
    CoServer = 1,
    CoRack = 2,
    CrossRack = 3,
}

/// Scenario parameters.
pub struct MrsimScenario {
    cfg: ScenarioConfig,
}

/// Results of one or more runs.
pub struct MrsimReport {
    runs: Vec<ModeRun>,
}

/// One result row. `saving_ratio` is NaN when not applicable.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrsimRow {
    pub mode: MrsimMode,
    pub k: u32,
    pub data_time_ns: u64,
    pub total_time_ns: u64,
    pub payload_link_traversals: u64,
    pub acks_bytes: u64,
    pub retx_count: u64,
    pub early_ack_count: u64,
    pub saving_ratio: f64,
    pub replicas_ok: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(s).expect("nul bytes removed")));
}

fn guard(f: impl FnOnce() -> Result<(), (MrsimStatus, String)>) -> MrsimStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MrsimStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MrsimStatus::Panic
        }
    }
}

fn null(what: &str) -> (MrsimStatus, String) {
    (MrsimStatus::NullPointer, format!("{what} is null"))
}

unsafe fn scenario_mut<'a>(s: *mut MrsimScenario) -> Result<&'a mut MrsimScenario, (MrsimStatus, String)> {
    s.as_mut().ok_or_else(|| null("scenario"))
}

fn report_error(e: analysis::ScenarioError) -> (MrsimStatus, String) {
    let status = if e.is_config() { MrsimStatus::Config } else { MrsimStatus::Simulation };
    (status, e.to_string())
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn mrsim_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mrsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a scenario with default parameters.
///
/// # Safety
/// `out` must be valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn mrsim_scenario_new(out: *mut *mut MrsimScenario) -> MrsimStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = Box::into_raw(Box::new(MrsimScenario { cfg: ScenarioConfig::default() }));
        Ok(())
    })
}

/// Parses a scenario from TOML text.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn mrsim_scenario_from_toml(text: *const c_char, out: *mut *mut MrsimScenario) -> MrsimStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if text.is_null() {
            return Err(null("text"));
        }
        let text = CStr::from_ptr(text).to_str().map_err(|e| (MrsimStatus::InvalidUtf8, e.to_string()))?;
        let cfg = ScenarioConfig::from_toml(text).map_err(|e| (MrsimStatus::Config, e.to_string()))?;
        *out = Box::into_raw(Box::new(MrsimScenario { cfg }));
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mrsim_scenario_free(s: *mut MrsimScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// # Safety
/// `s` must be a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn mrsim_scenario_set_k(s: *mut MrsimScenario, k: u32) -> MrsimStatus {
    guard(|| {
        let s = scenario_mut(s)?;
        if k == 0 {
            return Err((MrsimStatus::OutOfRange, "k must be at least 1".into()));
        }
        s.cfg.replication.k = k as usize;
        Ok(())
    })
}

/// # Safety
/// `s` must be a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn mrsim_scenario_set_mode(s: *mut MrsimScenario, mode: MrsimMode) -> MrsimStatus {
    guard(|| {
        scenario_mut(s)?.cfg.replication.mode = match mode {
            MrsimMode::Chain => ModeSelect::Chain,
            MrsimMode::Mirrored => ModeSelect::Mirrored,
            MrsimMode::Both => ModeSelect::Both,
        };
        Ok(())
    })
}

/// # Safety
/// `s` must be a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn mrsim_scenario_set_seed(s: *mut MrsimScenario, seed: u64) -> MrsimStatus {
    guard(|| {
        scenario_mut(s)?.cfg.engine.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `s` must be a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn mrsim_scenario_set_loss(s: *mut MrsimScenario, loss: f64) -> MrsimStatus {
    guard(|| {
        let s = scenario_mut(s)?;
        if !(0.0..1.0).contains(&loss) {
            return Err((MrsimStatus::OutOfRange, format!("loss {loss} outside [0, 1)")));
        }
        s.cfg.topology.loss = loss;
        Ok(())
    })
}

/// # Safety
/// `s` must be a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn mrsim_scenario_set_block_size(s: *mut MrsimScenario, bytes: u64) -> MrsimStatus {
    guard(|| {
        let s = scenario_mut(s)?;
        if bytes == 0 {
            return Err((MrsimStatus::OutOfRange, "block size must be positive".into()));
        }
        s.cfg.replication.block_size = bytes as usize;
        Ok(())
    })
}

/// Runs the scenario's configured modes.
///
/// # Safety
/// `s` must be a live scenario handle; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn mrsim_run(s: *const MrsimScenario, out: *mut *mut MrsimReport) -> MrsimStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("scenario"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let runs = analysis::run_scenario(&s.cfg).map_err(report_error)?;
        *out = Box::into_raw(Box::new(MrsimReport { runs }));
        Ok(())
    })
}

/// Runs both modes for every k in `[k_min, k_max]`.
///
/// # Safety
/// `s` must be a live scenario handle; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn mrsim_sweep(s: *const MrsimScenario, k_min: u32, k_max: u32, out: *mut *mut MrsimReport) -> MrsimStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("scenario"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if k_min == 0 || k_min > k_max {
            return Err((MrsimStatus::OutOfRange, format!("invalid k range {k_min}..={k_max}")));
        }
        let runs = analysis::sweep(&s.cfg, k_min as usize..=k_max as usize).map_err(report_error)?;
        *out = Box::into_raw(Box::new(MrsimReport { runs }));
        Ok(())
    })
}

/// # Safety
/// `r` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mrsim_report_free(r: *mut MrsimReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Number of rows; 0 for NULL.
///
/// # Safety
/// `r` must be NULL or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn mrsim_report_len(r: *const MrsimReport) -> usize {
    r.as_ref().map_or(0, |r| r.runs.len())
}

/// # Safety
/// `r` must be a live report handle; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn mrsim_report_row(r: *const MrsimReport, index: usize, out: *mut MrsimRow) -> MrsimStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("report"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let run = r.runs.get(index).ok_or_else(|| (MrsimStatus::OutOfRange, format!("row {index} of {}", r.runs.len())))?;
        let m = &run.metrics;
        let row = run.row();
        *out = MrsimRow {
            mode: match m.mode {
                Mode::Chain => MrsimMode::Chain,
                Mode::Mirrored => MrsimMode::Mirrored,
            },
            k: m.k as u32,
            data_time_ns: row.data_time_ns,
            total_time_ns: row.total_time_ns,
            payload_link_traversals: row.payload_link_traversals,
            acks_bytes: row.acks_bytes,
            retx_count: row.retx_count,
            early_ack_count: row.early_ack_count,
            saving_ratio: row.saving_ratio.parse().unwrap_or(f64::NAN),
            replicas_ok: m.replicas_match_source(),
        };
        Ok(())
    })
}

/// Writes the report as CSV with a trailing NUL. `needed` (optional)
/// receives the required size including the NUL; a short buffer yields
/// `BufferTooSmall` and is left untouched.
///
/// # Safety
/// `r` must be a live report handle; `buf` must be valid for `cap` bytes
/// (or NULL with `cap` 0); `needed` must be NULL or valid for writing.
#[no_mangle]
pub unsafe extern "C" fn mrsim_report_csv(r: *const MrsimReport, buf: *mut c_char, cap: usize, needed: *mut usize) -> MrsimStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("report"))?;
        let mut text = Vec::new();
        analysis::write_csv(&r.runs, &mut text).map_err(|e| (MrsimStatus::Simulation, e.to_string()))?;
        if let Some(n) = needed.as_mut() {
            *n = text.len() + 1;
        }
        if cap < text.len() + 1 {
            return Err((MrsimStatus::BufferTooSmall, format!("need {} bytes, have {cap}", text.len() + 1)));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// Mean analytic saving ratio over the placement cases of one client class.
///
/// # Safety
/// `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn mrsim_analytic_average(k: u32, class: MrsimClientClass, out: *mut f64) -> MrsimStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if !(1..=16).contains(&k) {
            return Err((MrsimStatus::OutOfRange, format!("k = {k} outside 1..=16")));
        }
        let class = match class {
            MrsimClientClass::Outside => ClientClass::Outside,
            MrsimClientClass::CoServer => ClientClass::CoServer,
            MrsimClientClass::CoRack => ClientClass::CoRack,
            MrsimClientClass::CrossRack => ClientClass::CrossRack,
        };
        *out = analysis::enumerate_average_savings(k as usize, class);
        Ok(())
    })
}

/// Mean of the per-class averages.
///
/// # Safety
/// `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn mrsim_analytic_pooled(k: u32, out: *mut f64) -> MrsimStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if !(1..=16).contains(&k) {
            return Err((MrsimStatus::OutOfRange, format!("k = {k} outside 1..=16")));
        }
        *out = analysis::pooled_average_savings(k as usize);
        Ok(())
    })
}
