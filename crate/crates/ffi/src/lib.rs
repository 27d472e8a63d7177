//! C interface. Objects cross the boundary as opaque handles; every fallible
//! call returns a [`PeStatus`] and leaves a message for
//! [`pe_last_error_message`] on failure.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use poi_enhancer::downstream::pairwise_distance;
use poi_enhancer::embedding::{EmbeddingMatrix, EmbeddingRole};
use poi_enhancer::enhancer::checkpoint::load_checkpoint;
use poi_enhancer::enhancer::{enhance, BatchInputs, EnhancerModel};
use poi_enhancer::extractor::load_features;
use poi_enhancer::tensor::Matrix;
use poi_enhancer::training::{infonce_loss, similarity_loss};
use poi_enhancer::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidInput = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Shape = 6,
    Numeric = 7,
    Corrupt = 8,
    Backend = 9,
    Panic = 10,
}

/// A trained enhancer.
pub struct PeModel {
    model: EnhancerModel,
}

/// A POI embedding table.
pub struct PeEmbeddings {
    emb: EmbeddingMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> PeStatus {
    match e {
        Error::Io { .. } => PeStatus::Io,
        Error::Parse { .. } | Error::Json(_) => PeStatus::Parse,
        Error::Config { .. } => PeStatus::Config,
        Error::InvalidInput(_) => PeStatus::InvalidInput,
        Error::Shape(_) => PeStatus::Shape,
        Error::Numeric(_) => PeStatus::Numeric,
        Error::Corrupt { .. } => PeStatus::Corrupt,
        Error::Backend(_) | Error::Geocode(_) => PeStatus::Backend,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PeStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("`{what}` is null"));
            PeStatus::NullArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            PeStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Core(Error::invalid(format!("`{what}` is not valid UTF-8"))))?;
    Ok(PathBuf::from(s))
}

unsafe fn matrix_arg(p: *const f64, rows: usize, cols: usize, what: &'static str) -> Result<Matrix, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(Matrix::new(rows, cols, std::slice::from_raw_parts(p, rows * cols).to_vec()))
}

fn out_arg<T>(p: *mut T, what: &'static str) -> Result<&'static mut T, Fail> {
    // SAFETY: caller guarantees a valid, writable pointer when non-null.
    unsafe { p.as_mut() }.ok_or(Fail::Null(what))
}

fn ref_arg<T>(p: *const T, what: &'static str) -> Result<&'static T, Fail> {
    // SAFETY: caller guarantees the handle came from this library.
    unsafe { p.as_ref() }.ok_or(Fail::Null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn pe_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by the training command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pe_model_load(path: *const c_char, out: *mut *mut PeModel) -> PeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let (model, _) = load_checkpoint(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(PeModel { model }));
        Ok(())
    })
}

/// Embedding width `d` and feature width `D` of a model.
///
/// # Safety
/// `model` must come from [`pe_model_load`]; `d` and `feature_dim` writable.
#[no_mangle]
pub unsafe extern "C" fn pe_model_dims(model: *const PeModel, d: *mut usize, feature_dim: *mut usize) -> PeStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        *out_arg(d, "d")? = m.model.hp.d;
        *out_arg(feature_dim, "feature_dim")? = m.model.hp.feature_dim;
        Ok(())
    })
}

/// Runs the model on one batch of `n` rows. `ev`, `ea`, `es` are `n×D`,
/// `e_poi` and `out` are `n×d`, all row-major.
///
/// # Safety
/// All arrays must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn pe_model_forward(
    model: *const PeModel,
    ev: *const f64,
    ea: *const f64,
    es: *const f64,
    e_poi: *const f64,
    n: usize,
    out: *mut f64,
) -> PeStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.model;
        let (fd, d) = (m.hp.feature_dim, m.hp.d);
        let inputs = BatchInputs {
            ev: matrix_arg(ev, n, fd, "ev")?,
            ea: matrix_arg(ea, n, fd, "ea")?,
            es: matrix_arg(es, n, fd, "es")?,
            e_poi: matrix_arg(e_poi, n, d, "e_poi")?,
        };
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let fused = m.forward(&inputs)?.e_fuse;
        std::slice::from_raw_parts_mut(out, n * d).copy_from_slice(fused.data());
        Ok(())
    })
}

/// Frees a model; null is ignored.
///
/// # Safety
/// `model` must come from [`pe_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pe_model_free(model: *mut PeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a whitespace-separated embedding file (`poi_id v1 … vd` per line).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pe_embeddings_load(path: *const c_char, out: *mut *mut PeEmbeddings) -> PeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let emb = EmbeddingMatrix::load(&path_arg(path, "path")?, EmbeddingRole::BasePoi)?;
        *out = Box::into_raw(Box::new(PeEmbeddings { emb }));
        Ok(())
    })
}

/// Writes an embedding table in the same text format.
///
/// # Safety
/// `emb` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pe_embeddings_save(emb: *const PeEmbeddings, path: *const c_char) -> PeStatus {
    guard(|| {
        let e = ref_arg(emb, "emb")?;
        e.emb.save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of rows and their width.
///
/// # Safety
/// `emb` must be a live handle; `len` and `dim` writable.
#[no_mangle]
pub unsafe extern "C" fn pe_embeddings_shape(emb: *const PeEmbeddings, len: *mut usize, dim: *mut usize) -> PeStatus {
    guard(|| {
        let e = ref_arg(emb, "emb")?;
        *out_arg(len, "len")? = e.emb.len();
        *out_arg(dim, "dim")? = e.emb.dim();
        Ok(())
    })
}

/// Copies the vector of `poi_id` into `out`, which holds `len` doubles.
///
/// # Safety
/// `emb` must be a live handle and `out` hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pe_embeddings_get(emb: *const PeEmbeddings, poi_id: u32, out: *mut f64, len: usize) -> PeStatus {
    guard(|| {
        let e = ref_arg(emb, "emb")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let row = e
            .emb
            .row_of(poi_id)
            .ok_or_else(|| Error::invalid(format!("poi {poi_id} has no embedding")))?;
        if len != row.len() {
            return Err(Error::Shape(format!("buffer holds {len} values, embedding has {}", row.len())).into());
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(row);
        Ok(())
    })
}

/// Euclidean distance between two POIs' embeddings.
///
/// # Safety
/// `emb` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pe_embeddings_distance(emb: *const PeEmbeddings, a: u32, b: u32, out: *mut f64) -> PeStatus {
    guard(|| {
        let e = ref_arg(emb, "emb")?;
        *out_arg(out, "out")? = pairwise_distance(&e.emb, a, b)?;
        Ok(())
    })
}

/// Frees an embedding table; null is ignored.
///
/// # Safety
/// `emb` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pe_embeddings_free(emb: *mut PeEmbeddings) {
    if !emb.is_null() {
        drop(Box::from_raw(emb));
    }
}

/// Enhances `base` with the features stored in `features_dir`.
///
/// # Safety
/// Handles must be live, `features_dir` NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pe_enhance(
    model: *const PeModel,
    base: *const PeEmbeddings,
    features_dir: *const c_char,
    chunk_size: usize,
    skip_missing: bool,
    out: *mut *mut PeEmbeddings,
) -> PeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let m = ref_arg(model, "model")?;
        let b = ref_arg(base, "base")?;
        let bundles = load_features(&path_arg(features_dir, "features_dir")?)?;
        let result = enhance(&m.model, &bundles, &b.emb, chunk_size, skip_missing)?;
        *out = Box::into_raw(Box::new(PeEmbeddings { emb: result.fused }));
        Ok(())
    })
}

/// InfoNCE of an `m×d` batch (anchor, positive, negatives) at temperature `gamma`.
///
/// # Safety
/// `fused` must hold `m*d` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn pe_infonce_loss(fused: *const f64, m: usize, d: usize, gamma: f64, out: *mut f64) -> PeStatus {
    guard(|| {
        let f = matrix_arg(fused, m, d, "fused")?;
        *out_arg(out, "out")? = infonce_loss(&f, gamma)?;
        Ok(())
    })
}

/// Mean absolute difference of the pairwise cosine matrices of two `m×d` batches.
///
/// # Safety
/// `fused` and `base` must hold `m*d` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn pe_similarity_loss(
    fused: *const f64,
    base: *const f64,
    m: usize,
    d: usize,
    out: *mut f64,
) -> PeStatus {
    guard(|| {
        let f = matrix_arg(fused, m, d, "fused")?;
        let b = matrix_arg(base, m, d, "base")?;
        *out_arg(out, "out")? = similarity_loss(&f, &b)?;
        Ok(())
    })
}
