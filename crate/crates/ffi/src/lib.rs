//! C ABI over `taskvec-core`.
//!
//! Objects cross the boundary as opaque handles created by `tv_*_new`-style
//! calls and released with the matching `tv_*_free`. Every fallible call
//! returns a [`TvStatus`]; on failure [`tv_last_error`] describes the cause.
//! Status values 2, 3 and 4 match the exit codes of the `taskvec` binary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use taskvec::config::Config;
use taskvec::harness::{self, ExperimentConfig, Regime, SuiteSpec, TaskSuite, TrainedState};
use taskvec::model::{ComposedModel, Mlp};
use taskvec::task_vectors::{read_checkpoint, svd_energy, write_checkpoint, ParamSet, PartitionScheme, TaskVectorPool};
use taskvec::{rng, Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TvStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, or a mismatched handle.
    InvalidArgument = 1,
    /// Invalid configuration or malformed input.
    Config = 2,
    /// A file or artifact does not exist.
    Missing = 3,
    /// Training or fine-tuning produced non-finite values.
    Numerical = 4,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 5,
    /// Unexpected internal failure.
    Internal = 6,
}

/// Per-run summary filled by [`tv_train`] and [`tv_state_evaluate`].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TvMetrics {
    pub avg_accuracy: f64,
    pub gated_ratio: f64,
    pub n_tasks: usize,
}

pub struct TvSuite {
    suite: TaskSuite,
}

/// Base parameters and the task-vector pool built from them.
pub struct TvPool {
    theta_0: ParamSet,
    pool: TaskVectorPool,
}

pub struct TvState {
    state: TrainedState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TvStatus {
    match e.exit_code() {
        3 => TvStatus::Missing,
        4 => TvStatus::Numerical,
        _ => TvStatus::Config,
    }
}

struct Fail(TvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(message: &str) -> Fail {
    Fail(TvStatus::InvalidArgument, message.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TvStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TvStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("output handle pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn fill(values: &[f64], out: *mut f64, cap: usize, len: *mut usize) -> Result<(), Fail> {
    if !len.is_null() {
        *len = values.len();
    }
    if values.len() > cap {
        return Err(Fail(TvStatus::BufferTooSmall, format!("need {} values, buffer holds {cap}", values.len())));
    }
    if values.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(invalid("output buffer is null"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generate a synthetic suite. Unlisted generator settings take their defaults.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn tv_suite_generate(
    seed: u64,
    n_tasks: usize,
    dim: usize,
    classes: usize,
    heterogeneity: f64,
    rank: usize,
    n_train: usize,
    n_test: usize,
    out: *mut *mut TvSuite,
) -> TvStatus {
    guard(|| {
        let spec = SuiteSpec { n_tasks, dim, classes, heterogeneity, rank, n_train, n_test, ..SuiteSpec::default() };
        let suite = harness::generate_task_suite(&spec, seed)?;
        write_out(out, TvSuite { suite })
    })
}

/// # Safety
/// `dir` must be a NUL-terminated string; `out` as in [`tv_suite_generate`].
#[no_mangle]
pub unsafe extern "C" fn tv_suite_load(dir: *const c_char, out: *mut *mut TvSuite) -> TvStatus {
    guard(|| {
        let suite = harness::load_suite(&PathBuf::from(str_arg(dir, "dir")?))?;
        write_out(out, TvSuite { suite })
    })
}

/// # Safety
/// `suite` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tv_suite_save(suite: *const TvSuite, dir: *const c_char) -> TvStatus {
    guard(|| {
        let s = ref_arg(suite, "suite")?;
        harness::save_suite(&s.suite, &PathBuf::from(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// Number of tasks, or 0 for a null handle.
///
/// # Safety
/// `suite` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tv_suite_n_tasks(suite: *const TvSuite) -> usize {
    suite.as_ref().map_or(0, |s| s.suite.n_tasks())
}

/// # Safety
/// `suite` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tv_suite_free(suite: *mut TvSuite) {
    if !suite.is_null() {
        drop(Box::from_raw(suite));
    }
}

/// Initialize a `dim -> hidden -> classes` base model from `seed`, fine-tune
/// it on every task, and collect the per-tensor task-vector pool.
///
/// # Safety
/// `suite` must come from this library; `out` as in [`tv_suite_generate`].
#[no_mangle]
pub unsafe extern "C" fn tv_pool_build(
    suite: *const TvSuite,
    seed: u64,
    hidden: usize,
    steps: usize,
    lr: f64,
    out: *mut *mut TvPool,
) -> TvStatus {
    guard(|| {
        let s = &ref_arg(suite, "suite")?.suite;
        let mlp = Mlp::new(s.spec.dim, hidden, s.spec.classes)?;
        let theta_0 = mlp.init(&mut rng::stream(seed, "base"));
        let (_, pool) = harness::build_pool(&theta_0, s, steps, lr, &PartitionScheme::PerTensor)?;
        write_out(out, TvPool { theta_0, pool })
    })
}

/// Save the base parameters and the pool as two checkpoints.
///
/// # Safety
/// `pool` must come from this library; paths must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tv_pool_save(pool: *const TvPool, theta_0_path: *const c_char, pool_path: *const c_char) -> TvStatus {
    guard(|| {
        let p = ref_arg(pool, "pool")?;
        write_checkpoint(&PathBuf::from(str_arg(theta_0_path, "theta_0_path")?), "base", &p.theta_0, Default::default())?;
        p.pool.save(&PathBuf::from(str_arg(pool_path, "pool_path")?))?;
        Ok(())
    })
}

/// # Safety
/// Paths must be NUL-terminated; `out` as in [`tv_suite_generate`].
#[no_mangle]
pub unsafe extern "C" fn tv_pool_load(theta_0_path: *const c_char, pool_path: *const c_char, out: *mut *mut TvPool) -> TvStatus {
    guard(|| {
        let theta_0 = read_checkpoint(&PathBuf::from(str_arg(theta_0_path, "theta_0_path")?))?.params;
        let pool = TaskVectorPool::load(&PathBuf::from(str_arg(pool_path, "pool_path")?))?;
        pool.layout_template().check_same_layout(&theta_0)?;
        write_out(out, TvPool { theta_0, pool })
    })
}

/// # Safety
/// `pool` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tv_pool_n_tasks(pool: *const TvPool) -> usize {
    pool.as_ref().map_or(0, |p| p.pool.n_tasks())
}

/// # Safety
/// `pool` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tv_pool_n_blocks(pool: *const TvPool) -> usize {
    pool.as_ref().map_or(0, |p| p.pool.n_blocks())
}

/// Cumulative singular-value energy of the pool. `*len` receives the curve
/// length even when the buffer is too small.
///
/// # Safety
/// `out` must hold `cap` doubles; `len` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn tv_pool_energy(pool: *const TvPool, out: *mut f64, cap: usize, len: *mut usize) -> TvStatus {
    guard(|| {
        let energy = svd_energy(&ref_arg(pool, "pool")?.pool)?;
        fill(&energy, out, cap, len)
    })
}

/// # Safety
/// `pool` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tv_pool_free(pool: *mut TvPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

/// Train one regime. `config_toml` is an experiment config in the same
/// format as the CLI's `--config` file; only its `[train]` section is used.
/// Pass null for defaults.
///
/// # Safety
/// Handles must come from this library; strings must be NUL-terminated;
/// `metrics` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn tv_train(
    suite: *const TvSuite,
    pool: *const TvPool,
    regime: *const c_char,
    seed: u64,
    config_toml: *const c_char,
    out: *mut *mut TvState,
    metrics: *mut TvMetrics,
) -> TvStatus {
    guard(|| {
        let s = &ref_arg(suite, "suite")?.suite;
        let p = ref_arg(pool, "pool")?;
        let regime: Regime = str_arg(regime, "regime")?.parse()?;
        let cfg = if config_toml.is_null() { Config::default() } else { Config::from_toml(str_arg(config_toml, "config_toml")?)? };
        cfg.train.validate()?;
        let cell = ExperimentConfig { regime, seed, train: cfg.train };
        let (state, record) = harness::train_regime(&cell, s, &p.pool, &p.theta_0)?;
        if let Some(m) = metrics.as_mut() {
            *m = TvMetrics { avg_accuracy: record.avg_accuracy, gated_ratio: record.gated_ratio, n_tasks: record.task_accuracies.len() };
        }
        write_out(out, TvState { state })
    })
}

/// Evaluate on every task's test split. Per-task accuracies go to
/// `task_accuracies` (capacity `cap`) when it is non-null.
///
/// # Safety
/// Handles must come from this library; buffers as described.
#[no_mangle]
pub unsafe extern "C" fn tv_state_evaluate(
    state: *const TvState,
    suite: *const TvSuite,
    hard_gate: bool,
    metrics: *mut TvMetrics,
    task_accuracies: *mut f64,
    cap: usize,
) -> TvStatus {
    guard(|| {
        let st = &ref_arg(state, "state")?.state;
        let s = &ref_arg(suite, "suite")?.suite;
        let record = harness::evaluate(st, s, hard_gate)?;
        if let Some(m) = metrics.as_mut() {
            *m = TvMetrics { avg_accuracy: record.avg_accuracy, gated_ratio: record.gated_ratio, n_tasks: record.task_accuracies.len() };
        }
        if !task_accuracies.is_null() {
            fill(&record.task_accuracies, task_accuracies, cap, ptr::null_mut())?;
        }
        Ok(())
    })
}

/// Composition coefficients for `rows` row-major inputs of width `cols`,
/// written row-major as `rows x (n_tasks * n_blocks)`.
///
/// # Safety
/// `x` must hold `rows * cols` doubles and `out` `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn tv_state_coefficients(
    state: *const TvState,
    x: *const f64,
    rows: usize,
    cols: usize,
    hard_gate: bool,
    out: *mut f64,
    cap: usize,
) -> TvStatus {
    guard(|| {
        let st = &ref_arg(state, "state")?.state;
        if x.is_null() || rows == 0 {
            return Err(invalid("x is null or empty"));
        }
        let x = Tensor::matrix(rows, cols, std::slice::from_raw_parts(x, rows * cols).to_vec())?;
        let z = st.coefficients(&x, hard_gate)?;
        fill(z.data(), out, cap, ptr::null_mut())
    })
}

/// # Safety
/// `state` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tv_state_save(state: *const TvState, path: *const c_char) -> TvStatus {
    guard(|| {
        ref_arg(state, "state")?.state.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Load a trained state saved by [`tv_state_save`] against `pool`.
///
/// # Safety
/// `pool` must come from this library; `path` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tv_state_load(pool: *const TvPool, path: *const c_char, out: *mut *mut TvState) -> TvStatus {
    guard(|| {
        let p = ref_arg(pool, "pool")?;
        let model = Arc::new(ComposedModel::new(&p.theta_0, &p.pool)?);
        let state = TrainedState::load(&PathBuf::from(str_arg(path, "path")?), model, p.pool.n_tasks(), p.pool.n_blocks())?;
        write_out(out, TvState { state })
    })
}

/// # Safety
/// `state` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tv_state_free(state: *mut TvState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}
