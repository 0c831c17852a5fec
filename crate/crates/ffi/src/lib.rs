//! C ABI over the `fedprune` simulator.
//!
//! Configs and finished runs are opaque handles owned by the caller and
//! released with their `_free` function. Fallible calls return an
//! [`FpStatus`]; the message of the last failure on the calling thread is
//! available from [`fp_last_error`]. Strings returned by the library are
//! released with [`fp_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fedprune::config::parse_with_overrides;
use fedprune::masks::{mask_from_scores, Pattern, SliceGeometry};
use fedprune::metrics::{metrics_csv_string, write_metrics, RoundRecord};
use fedprune::schedule::{allocate_per_layer, quantize_slice_count, Allocation, LayerStat, Phase};
use fedprune::{run_experiment, ExperimentOutput, FedPruneError, RunConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    OutOfRange = 4,
    Io = 5,
    Runtime = 6,
    Panic = 7,
}

/// Structured pruning pattern, as accepted by [`fp_mask_from_scores`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpPattern {
    WholeRow = 0,
    WholeColumn = 1,
    HalfRow = 2,
    HalfColumn = 3,
}

/// Per-layer allocation mode, as accepted by [`fp_allocate_per_layer`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpAllocation {
    Unified = 0,
    AdaptiveVerbatim = 1,
    AdaptiveBudget = 2,
}

/// Training phase stored in [`FpRecord::phase`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpPhase {
    Pruning = 0,
    Refining = 1,
    FineTuning = 2,
}

/// One row of the metrics table.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpRecord {
    pub round: u32,
    /// An [`FpPhase`] value.
    pub phase: u32,
    pub sparsity: f64,
    pub zero_param_ratio: f64,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub wall_time_s: f64,
}

/// Opaque run configuration.
pub struct FpConfig {
    inner: RunConfig,
}

/// Opaque result of a finished experiment.
pub struct FpRun {
    output: ExperimentOutput,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: FpStatus, msg: impl Into<String>) -> FpStatus {
    set_error(msg.into());
    status
}

fn status_of(err: &FedPruneError) -> FpStatus {
    match err {
        e if e.is_config_error() => FpStatus::Config,
        FedPruneError::OutOfRange(_) | FedPruneError::Empty(_) | FedPruneError::ShapeMismatch(_) => {
            FpStatus::OutOfRange
        }
        FedPruneError::Io(_) | FedPruneError::Csv(_) => FpStatus::Io,
        _ => FpStatus::Runtime,
    }
}

/// Runs `f`, converting library errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (FpStatus, String)>) -> FpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FpStatus::Ok,
        Ok(Err((status, msg))) => fail(status, msg),
        Err(_) => fail(FpStatus::Panic, "internal panic"),
    }
}

fn lib_err(e: FedPruneError) -> (FpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null_err(what: &str) -> (FpStatus, String) {
    (FpStatus::NullPointer, format!("`{what}` is null"))
}

/// # Safety
/// `p` must be null or a valid nul-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (FpStatus, String)> {
    if p.is_null() {
        return Err(null_err(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (FpStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

fn pattern_from(raw: u32) -> Result<Pattern, (FpStatus, String)> {
    match raw {
        0 => Ok(Pattern::WholeRow),
        1 => Ok(Pattern::WholeColumn),
        2 => Ok(Pattern::HalfRow),
        3 => Ok(Pattern::HalfColumn),
        _ => Err((FpStatus::OutOfRange, format!("unknown pattern {raw}"))),
    }
}

fn allocation_from(raw: u32) -> Result<Allocation, (FpStatus, String)> {
    match raw {
        0 => Ok(Allocation::Unified),
        1 => Ok(Allocation::AdaptiveVerbatim),
        2 => Ok(Allocation::AdaptiveBudget),
        _ => Err((FpStatus::OutOfRange, format!("unknown allocation {raw}"))),
    }
}

fn record_to_c(r: &RoundRecord) -> FpRecord {
    let phase = match r.phase {
        Phase::Pruning => FpPhase::Pruning,
        Phase::Refining => FpPhase::Refining,
        Phase::FineTuning => FpPhase::FineTuning,
    };
    FpRecord {
        round: r.round,
        phase: phase as u32,
        sparsity: r.sparsity,
        zero_param_ratio: r.zero_param_ratio,
        bytes_down: r.bytes_down,
        bytes_up: r.bytes_up,
        train_loss: r.train_loss,
        eval_accuracy: r.eval_accuracy,
        wall_time_s: r.wall_time_s,
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn fp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a TOML config document. Missing keys take their defaults; an
/// empty string yields the reference configuration.
///
/// # Safety
/// `text` must be a valid nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fp_config_parse(text: *const c_char, out: *mut *mut FpConfig) -> FpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        let text = read_str(text, "text")?;
        let inner = parse_with_overrides(text, &[]).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FpConfig { inner }));
        Ok(())
    })
}

/// Sets one config key; `value` is read as TOML, falling back to a plain
/// string. The config is left unchanged when the result does not validate.
///
/// # Safety
/// `cfg` must be a live config handle; `key` and `value` valid strings.
#[no_mangle]
pub unsafe extern "C" fn fp_config_set(cfg: *mut FpConfig, key: *const c_char, value: *const c_char) -> FpStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null_err("cfg"))?;
        let key = read_str(key, "key")?;
        let value = read_str(value, "value")?;
        let updated =
            parse_with_overrides(&cfg.inner.render(), &[(key.to_string(), value.to_string())]).map_err(lib_err)?;
        cfg.inner = updated;
        Ok(())
    })
}

/// Renders the config as TOML. Free the result with [`fp_string_free`].
///
/// # Safety
/// `cfg` must be null or a live config handle.
#[no_mangle]
pub unsafe extern "C" fn fp_config_render(cfg: *const FpConfig) -> *mut c_char {
    match cfg.as_ref() {
        Some(c) => into_c_string(c.inner.render()),
        None => {
            set_error("`cfg` is null".into());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `cfg` must be null or a config handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_config_free(cfg: *mut FpConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs a full experiment in memory.
///
/// # Safety
/// `cfg` must be a live config handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fp_experiment_run(cfg: *const FpConfig, out: *mut *mut FpRun) -> FpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        let cfg = cfg.as_ref().ok_or_else(|| null_err("cfg"))?;
        let output = run_experiment(&cfg.inner).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FpRun { output }));
        Ok(())
    })
}

/// # Safety
/// `run` must be null or a run handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_run_free(run: *mut FpRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of metrics rows, including the initial evaluation; 0 for null.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn fp_run_num_records(run: *const FpRun) -> usize {
    run.as_ref().map_or(0, |r| r.output.records.len())
}

/// Copies metrics row `index` into `out`.
///
/// # Safety
/// `run` must be a live run handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fp_run_record(run: *const FpRun, index: usize, out: *mut FpRecord) -> FpStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null_err("run"))?;
        if out.is_null() {
            return Err(null_err("out"));
        }
        let rec = run
            .output
            .records
            .get(index)
            .ok_or_else(|| (FpStatus::OutOfRange, format!("record {index} of {}", run.output.records.len())))?;
        *out = record_to_c(rec);
        Ok(())
    })
}

/// The metrics table as CSV text. Free the result with [`fp_string_free`].
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn fp_run_metrics_csv(run: *const FpRun) -> *mut c_char {
    let Some(run) = run.as_ref() else {
        set_error("`run` is null".into());
        return ptr::null_mut();
    };
    match metrics_csv_string(&run.output.records) {
        Ok(s) => into_c_string(s),
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    }
}

/// Writes the metrics CSV to `path`.
///
/// # Safety
/// `run` must be a live run handle and `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn fp_run_write_csv(run: *const FpRun, path: *const c_char) -> FpStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null_err("run"))?;
        let path = read_str(path, "path")?;
        write_metrics(&run.output.records, Path::new(path)).map_err(lib_err)
    })
}

/// Writes the final model checkpoint to `path`.
///
/// # Safety
/// `run` must be a live run handle and `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn fp_run_write_checkpoint(run: *const FpRun, path: *const c_char) -> FpStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null_err("run"))?;
        let path = read_str(path, "path")?;
        let file = File::create(path).map_err(|e| lib_err(e.into()))?;
        run.output.store.write_checkpoint(file).map_err(lib_err)
    })
}

/// Slices pruned out of `n_slices` at `sparsity`.
#[no_mangle]
pub extern "C" fn fp_quantize_slice_count(sparsity: f64, n_slices: usize) -> usize {
    quantize_slice_count(sparsity, n_slices)
}

/// Keep flags for one `rows x cols` matrix from its slice scores. `scores`
/// and `keep_out` both hold `n_slices` entries; `keep_out` receives 1 for
/// kept and 0 for pruned slices.
///
/// # Safety
/// `scores` must point to `n_slices` doubles and `keep_out` to `n_slices` bytes.
#[no_mangle]
pub unsafe extern "C" fn fp_mask_from_scores(
    pattern: u32,
    rows: usize,
    cols: usize,
    scores: *const f64,
    n_slices: usize,
    sparsity: f64,
    keep_out: *mut u8,
) -> FpStatus {
    guard(|| {
        if scores.is_null() {
            return Err(null_err("scores"));
        }
        if keep_out.is_null() {
            return Err(null_err("keep_out"));
        }
        let geometry = SliceGeometry::new(pattern_from(pattern)?, rows, cols).map_err(lib_err)?;
        if geometry.n_slices() != n_slices {
            return Err((
                FpStatus::OutOfRange,
                format!("{rows}x{cols} has {} slices, got {n_slices}", geometry.n_slices()),
            ));
        }
        let scores = std::slice::from_raw_parts(scores, n_slices);
        let keep = mask_from_scores(&geometry, scores, sparsity).map_err(lib_err)?;
        let out = std::slice::from_raw_parts_mut(keep_out, n_slices);
        for (o, k) in out.iter_mut().zip(keep) {
            *o = u8::from(k);
        }
        Ok(())
    })
}

/// Per-layer densities for a global `target` sparsity. `magnitudes`,
/// `param_counts` and `densities_out` each hold `n_layers` entries.
///
/// # Safety
/// The three arrays must be valid for `n_layers` elements.
#[no_mangle]
pub unsafe extern "C" fn fp_allocate_per_layer(
    target: f64,
    magnitudes: *const f64,
    param_counts: *const usize,
    n_layers: usize,
    mode: u32,
    d_min: f64,
    densities_out: *mut f64,
) -> FpStatus {
    guard(|| {
        if magnitudes.is_null() || param_counts.is_null() || densities_out.is_null() {
            return Err(null_err("array argument"));
        }
        let mags = std::slice::from_raw_parts(magnitudes, n_layers);
        let counts = std::slice::from_raw_parts(param_counts, n_layers);
        let layers: Vec<LayerStat> = mags
            .iter()
            .zip(counts)
            .enumerate()
            .map(|(i, (&magnitude, &param_count))| LayerStat { name: format!("layer{i}"), magnitude, param_count })
            .collect();
        let d = allocate_per_layer(target, &layers, allocation_from(mode)?, d_min).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(densities_out, n_layers).copy_from_slice(&d);
        Ok(())
    })
}
