//! C ABI over the `gito` crate.
//!
//! Handles are opaque pointers created by `*_new`/`*_load` and released
//! by the matching `*_free`. Every fallible call returns a [`GitoStatus`];
//! on failure [`gito_last_error`] describes the most recent error on the
//! calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gito::checkpoint::Checkpoint;
use gito::data::Sample;
use gito::graph::PointCloud;
use gito::model::{Gito, ModelConfig};
use gito::{GitoError, Precision};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GitoStatus {
    Ok = 0,
    /// A required pointer argument was null.
    Null = 1,
    /// Bad argument, config or file contents.
    Invalid = 2,
    Io = 3,
    /// Array lengths or channel counts do not match.
    Shape = 4,
    /// An internal panic was caught.
    Panic = 5,
}

/// Loaded model (f32 or f64, as stored in the checkpoint).
pub struct GitoModel {
    inner: AnyModel,
}

enum AnyModel {
    F32(Gito<f32>),
    F64(Gito<f64>),
}

/// Input functions and query points for one prediction.
pub struct GitoSample {
    coord_dim: usize,
    inputs: Vec<PointCloud>,
    queries: Option<PointCloud>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &GitoError) -> GitoStatus {
    match e {
        GitoError::Io(_) => GitoStatus::Io,
        GitoError::Shape { .. } | GitoError::ChannelMismatch(_) => GitoStatus::Shape,
        _ => GitoStatus::Invalid,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), GitoStatus>) -> GitoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GitoStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            GitoStatus::Panic
        }
    }
}

fn fail(e: GitoError) -> GitoStatus {
    set_error(&format!("{}: {e}", e.kind()));
    status_of(&e)
}

fn null(what: &str) -> GitoStatus {
    set_error(&format!("null pointer: {what}"));
    GitoStatus::Null
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], GitoStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message for the last failed call on this thread. Valid until the next
/// failing call on the same thread; never null.
#[no_mangle]
pub extern "C" fn gito_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint written by `gito train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gito_model_load(path: *const c_char, out: *mut *mut GitoModel) -> GitoStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| {
            set_error("path is not UTF-8");
            GitoStatus::Invalid
        })?;
        let ck = Checkpoint::load(Path::new(path)).map_err(fail)?;
        let precision = ModelConfig::parse(&ck.metadata).map_err(fail)?.precision;
        let inner = match precision {
            Precision::F32 => AnyModel::F32(Gito::from_checkpoint(&ck).map_err(fail)?),
            Precision::F64 => AnyModel::F64(Gito::from_checkpoint(&ck).map_err(fail)?),
        };
        *out = Box::into_raw(Box::new(GitoModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from [`gito_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn gito_model_free(model: *mut GitoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trainable parameter count.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gito_model_param_count(model: *const GitoModel, out: *mut usize) -> GitoStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = match &m.inner {
            AnyModel::F32(g) => g.param_count(),
            AnyModel::F64(g) => g.param_count(),
        };
        Ok(())
    })
}

/// Output fields predicted per query point.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gito_model_out_channels(model: *const GitoModel, out: *mut usize) -> GitoStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = match &m.inner {
            AnyModel::F32(g) => g.config.output_field_count,
            AnyModel::F64(g) => g.config.output_field_count,
        };
        Ok(())
    })
}

/// Empty sample in `coord_dim` dimensions.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gito_sample_new(coord_dim: usize, out: *mut *mut GitoSample) -> GitoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if coord_dim == 0 {
            set_error("coord_dim must be positive");
            return Err(GitoStatus::Invalid);
        }
        *out = Box::into_raw(Box::new(GitoSample {
            coord_dim,
            inputs: Vec::new(),
            queries: None,
        }));
        Ok(())
    })
}

/// Appends an input function: `coords` is `[n_points, coord_dim]`,
/// `values` is `[n_points, channels]`, both row-major.
///
/// # Safety
/// `sample` must be live; the arrays must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gito_sample_add_input(
    sample: *mut GitoSample,
    coords: *const f64,
    n_points: usize,
    values: *const f64,
    channels: usize,
) -> GitoStatus {
    guard(|| {
        let s = sample.as_mut().ok_or_else(|| null("sample"))?;
        let c = slice(coords, n_points * s.coord_dim, "coords")?;
        let v = slice(values, n_points * channels, "values")?;
        let cloud = PointCloud::with_values(s.coord_dim, c.to_vec(), channels, v.to_vec()).map_err(fail)?;
        s.inputs.push(cloud);
        Ok(())
    })
}

/// Sets the query points, `[n_queries, coord_dim]` row-major.
///
/// # Safety
/// `sample` must be live; `coords` must hold `n_queries * coord_dim` values.
#[no_mangle]
pub unsafe extern "C" fn gito_sample_set_queries(sample: *mut GitoSample, coords: *const f64, n_queries: usize) -> GitoStatus {
    guard(|| {
        let s = sample.as_mut().ok_or_else(|| null("sample"))?;
        let c = slice(coords, n_queries * s.coord_dim, "coords")?;
        s.queries = Some(PointCloud::new(s.coord_dim, c.to_vec()).map_err(fail)?);
        Ok(())
    })
}

/// # Safety
/// `sample` must be null or come from [`gito_sample_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn gito_sample_free(sample: *mut GitoSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// Predicts `[n_queries, out_channels]` physical-unit values into `out`,
/// which holds `out_len` doubles. `written` receives the count.
///
/// # Safety
/// Handles must be live; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gito_model_predict(
    model: *const GitoModel,
    sample: *const GitoSample,
    out: *mut f64,
    out_len: usize,
    written: *mut usize,
) -> GitoStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let s = sample.as_ref().ok_or_else(|| null("sample"))?;
        let queries = s.queries.clone().ok_or_else(|| {
            set_error("sample has no query points");
            GitoStatus::Invalid
        })?;
        let c = match &m.inner {
            AnyModel::F32(g) => g.config.output_field_count,
            AnyModel::F64(g) => g.config.output_field_count,
        };
        let zeros = vec![0.0; queries.len() * c];
        let sample = Sample::new(s.inputs.clone(), queries, zeros, c).map_err(fail)?;
        let pred = match &m.inner {
            AnyModel::F32(g) => g.predict(&sample),
            AnyModel::F64(g) => g.predict(&sample),
        }
        .map_err(fail)?;
        if out_len < pred.len() {
            set_error(&format!("output buffer holds {out_len} values, need {}", pred.len()));
            return Err(GitoStatus::Shape);
        }
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(pred.as_ptr(), out, pred.len());
        if let Some(w) = written.as_mut() {
            *w = pred.len();
        }
        Ok(())
    })
}

/// Per-channel relative L2 of `pred` against `truth` (both `len` values,
/// `channels` interleaved). `per_channel` may be null; otherwise it
/// receives `channels` values.
///
/// # Safety
/// Arrays must hold the stated lengths; `mean` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gito_relative_l2(
    pred: *const f64,
    truth: *const f64,
    len: usize,
    channels: usize,
    per_channel: *mut f64,
    mean: *mut f64,
) -> GitoStatus {
    guard(|| {
        let p = slice(pred, len, "pred")?;
        let t = slice(truth, len, "truth")?;
        let mean = mean.as_mut().ok_or_else(|| null("mean"))?;
        let r = gito::train::relative_l2(p, t, channels).map_err(fail)?;
        *mean = r.mean;
        if !per_channel.is_null() {
            ptr::copy_nonoverlapping(r.per_channel.as_ptr(), per_channel, channels);
        }
        Ok(())
    })
}
