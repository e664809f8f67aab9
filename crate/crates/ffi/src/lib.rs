//! C ABI over the trajclust library.
//!
//! Every entry point returns a [`TcStatus`]. On failure a message describing
//! the error is kept per thread and can be read with [`tc_last_error`].
//! Datasets and graphs are opaque handles released with their `_free`
//! function. Panics never cross the boundary; they surface as
//! [`TcStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::str::FromStr;

use trajclust::cli::{run_method, CliError, Method, MethodParams};
use trajclust::coloring::{self, Graph, Validity};
use trajclust::dataset::{self, LabeledDataset};
use trajclust::envs::EnvId;
use trajclust::metrics;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    MethodError = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Clustering method selector.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcMethod {
    Pgkmeans = 0,
    Caae = 1,
    ReturnKmeans = 2,
    LatentKmeans = 3,
}

/// Clustering settings. `k_star == 0` disables merging.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TcClusterParams {
    pub k: usize,
    pub k_star: usize,
    pub best_of: usize,
    pub max_iters: usize,
    pub epochs: usize,
    pub alpha: f64,
}

/// Opaque trajectory dataset.
pub struct TcDataset {
    inner: LabeledDataset,
}

/// Opaque conflict graph.
pub struct TcGraph {
    inner: Graph,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(TcStatus, String);

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        let status = match e {
            CliError::Usage(_) => TcStatus::InvalidArgument,
            CliError::Data(_) => TcStatus::DataError,
            CliError::Method(_) => TcStatus::MethodError,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: TcStatus, message: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, message.into()))
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TcStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {message}"));
            TcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(TcStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(TcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(TcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(TcStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(p: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return fail(TcStatus::NullPointer, format!("{what} is null"));
    }
    p.write(value);
    Ok(())
}

unsafe fn copy_out(values: &[usize], buf: *mut usize, len: usize) -> Result<(), Failure> {
    if len < values.len() {
        return fail(
            TcStatus::BufferTooSmall,
            format!("buffer holds {len} entries, {} needed", values.len()),
        );
    }
    if values.is_empty() {
        return Ok(());
    }
    if buf.is_null() {
        return fail(TcStatus::NullPointer, "output buffer is null");
    }
    std::ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    Ok(())
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Rolls out every expert of `env` for `episodes` episodes each.
///
/// # Safety
/// `env` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tc_dataset_generate(
    env: *const c_char,
    episodes: usize,
    seed: u64,
    out: *mut *mut TcDataset,
) -> TcStatus {
    guard(|| {
        let name = str_arg(env, "env")?;
        let env = EnvId::from_str(name).or_else(|e| fail(TcStatus::InvalidArgument, e.to_string()))?;
        let experts: Vec<usize> = (0..env.expert_count()).collect();
        let inner = dataset::generate(env, &experts, episodes, seed)
            .or_else(|e| fail(TcStatus::InvalidArgument, e.to_string()))?;
        write_out(out, Box::into_raw(Box::new(TcDataset { inner })), "out")
    })
}

/// Reads a dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tc_dataset_load(path: *const c_char, out: *mut *mut TcDataset) -> TcStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let inner = dataset::load(&path).or_else(|e| fail(TcStatus::DataError, format!("{}: {e}", path.display())))?;
        write_out(out, Box::into_raw(Box::new(TcDataset { inner })), "out")
    })
}

/// Writes a dataset file.
///
/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tc_dataset_save(ds: *const TcDataset, path: *const c_char) -> TcStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let path = str_arg(path, "path")?;
        dataset::save(&ds.inner, path).or_else(|e| fail(TcStatus::DataError, e.to_string()))
    })
}

/// Number of trajectories.
///
/// # Safety
/// `ds` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tc_dataset_len(ds: *const TcDataset, out: *mut usize) -> TcStatus {
    guard(|| write_out(out, ref_arg(ds, "dataset")?.inner.len(), "out"))
}

/// Copies the ground-truth labels into `buf`, which must hold at least
/// `tc_dataset_len` entries.
///
/// # Safety
/// `ds` must be a live handle and `buf` must point to `len` writable entries.
#[no_mangle]
pub unsafe extern "C" fn tc_dataset_labels(ds: *const TcDataset, buf: *mut usize, len: usize) -> TcStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let labels = ds
            .inner
            .labels
            .as_deref()
            .ok_or_else(|| Failure(TcStatus::DataError, "dataset has no labels".into()))?;
        copy_out(labels, buf, len)
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tc_dataset_free(ds: *mut TcDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Defaults: one run, 50 iterations, 50 epochs, attraction weight 1.
#[no_mangle]
pub extern "C" fn tc_cluster_params_default(k: usize) -> TcClusterParams {
    let p = MethodParams::new(Method::Pgkmeans, k);
    TcClusterParams {
        k,
        k_star: 0,
        best_of: p.best_of,
        max_iters: p.max_iters,
        epochs: p.epochs,
        alpha: p.alpha,
    }
}

/// Clusters the trajectories of `ds` (labels are never read) and writes one
/// cluster id per trajectory into `assignment`. `final_value` may be null;
/// otherwise it receives the final objective or training loss, or NaN when
/// the method has none.
///
/// # Safety
/// `ds` and `params` must be valid, `assignment` must point to `len`
/// writable entries and `final_value` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn tc_cluster(
    ds: *const TcDataset,
    method: TcMethod,
    params: *const TcClusterParams,
    seed: u64,
    assignment: *mut usize,
    len: usize,
    final_value: *mut f64,
) -> TcStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let p = ref_arg(params, "params")?;
        if len < ds.inner.len() {
            return fail(
                TcStatus::BufferTooSmall,
                format!("buffer holds {len} entries, {} needed", ds.inner.len()),
            );
        }
        let method = match method {
            TcMethod::Pgkmeans => Method::Pgkmeans,
            TcMethod::Caae => Method::Caae,
            TcMethod::ReturnKmeans => Method::ReturnKmeans,
            TcMethod::LatentKmeans => Method::LatentKmeans,
        };
        let params = MethodParams {
            k_star: (p.k_star > 0).then_some(p.k_star),
            best_of: p.best_of,
            max_iters: p.max_iters,
            epochs: p.epochs,
            alpha: p.alpha,
            ..MethodParams::new(method, p.k)
        };
        let outcome = run_method(&ds.inner, &params, seed)?;
        copy_out(&outcome.assignment, assignment, len)?;
        if !final_value.is_null() {
            final_value.write(outcome.final_value.unwrap_or(f64::NAN));
        }
        Ok(())
    })
}

/// Normalized mutual information of two labelings of length `n`.
///
/// # Safety
/// `pred` and `truth` must point to `n` readable entries; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tc_nmi(pred: *const usize, truth: *const usize, n: usize, out: *mut f64) -> TcStatus {
    guard(|| {
        let pred = slice_arg(pred, n, "pred")?;
        let truth = slice_arg(truth, n, "truth")?;
        let v = metrics::nmi(pred, truth).or_else(|e| fail(TcStatus::InvalidArgument, e.to_string()))?;
        write_out(out, v, "out")
    })
}

/// Builds the conflict graph of a dataset.
///
/// # Safety
/// `ds` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tc_graph_build(ds: *const TcDataset, out: *mut *mut TcGraph) -> TcStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let inner = coloring::build_graph(&ds.inner.trajectories);
        write_out(out, Box::into_raw(Box::new(TcGraph { inner })), "out")
    })
}

/// Node and edge counts; either output may be null.
///
/// # Safety
/// `g` must be a live handle; outputs must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn tc_graph_size(g: *const TcGraph, nodes: *mut usize, edges: *mut usize) -> TcStatus {
    guard(|| {
        let g = ref_arg(g, "graph")?;
        if !nodes.is_null() {
            nodes.write(g.inner.node_count());
        }
        if !edges.is_null() {
            edges.write(g.inner.edge_count());
        }
        Ok(())
    })
}

/// Checks that no conflicting pair shares a cluster. On a violation
/// `valid` is false and `u`, `v` name the witness pair.
///
/// # Safety
/// `g` must be a live handle, `assignment` must point to `n` readable
/// entries and `valid`, `u`, `v` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tc_graph_check(
    g: *const TcGraph,
    assignment: *const usize,
    n: usize,
    valid: *mut bool,
    u: *mut usize,
    v: *mut usize,
) -> TcStatus {
    guard(|| {
        let g = ref_arg(g, "graph")?;
        let assignment = slice_arg(assignment, n, "assignment")?;
        let verdict = coloring::clustering_valid(&g.inner, assignment)
            .or_else(|e| fail(TcStatus::InvalidArgument, e.to_string()))?;
        let (ok, a, b) = match verdict {
            Validity::Valid => (true, 0, 0),
            Validity::Violated(a, b) => (false, a, b),
        };
        write_out(valid, ok, "valid")?;
        write_out(u, a, "u")?;
        write_out(v, b, "v")
    })
}

/// Releases a graph. Null is ignored.
///
/// # Safety
/// `g` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tc_graph_free(g: *mut TcGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}
