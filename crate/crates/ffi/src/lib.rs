//! C ABI over `prodmatch`.
//!
//! Objects cross the boundary as opaque handles created by `pm_*_load` /
//! `pm_*_build` and released by the matching `pm_*_free`. Every fallible
//! function returns a [`PmStatus`]; on failure the message is available from
//! [`pm_last_error`] on the same thread. Panics are caught and reported as
//! `PM_STATUS_PANIC`. Strings are UTF-8 and NUL-terminated.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use prodmatch::domain::{ingest_offers, normalize_text, Corpus, OfferFormat};
use prodmatch::encoder::{embed_corpus, fuse, read_head, ProjectionHead};
use prodmatch::error::Error;
use prodmatch::hitl::{lr_plus_from, predict_hitl_precision, LrPlus};
use prodmatch::retrieval::{
    brand_block, discriminate, jaro_winkler, knn, read_index, MatchIndex,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Format = 5,
    Dimension = 6,
    NotFound = 7,
    Undefined = 8,
    BufferTooSmall = 9,
    Panic = 99,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> PmStatus {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => PmStatus::NotFound,
        Error::Io(_) => PmStatus::Io,
        Error::Parse { .. } | Error::Format(_) | Error::Json(_) | Error::CorruptLog { .. } => {
            PmStatus::Format
        }
        Error::Dimension { .. } => PmStatus::Dimension,
        Error::NotFound(_) | Error::MissingEmbedding(_) => PmStatus::NotFound,
        Error::UndefinedMetric(_) | Error::NoPositivePairs => PmStatus::Undefined,
        Error::Offer { source, .. } | Error::Stage { source, .. } => status_of(source),
        _ => PmStatus::InvalidArgument,
    }
}

struct Failure(PmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `f`, translating errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            PmStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(PmStatus::NullArgument, format!("{name} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(PmStatus::InvalidUtf8, format!("{name}: {e}")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Offer corpus loaded from JSONL (with its `.emb` sidecar when present).
pub struct PmCorpus {
    corpus: Corpus,
}

/// Trained projection head.
pub struct PmHead {
    head: ProjectionHead,
}

/// Brand-blocked retrieval index.
pub struct PmIndex {
    index: MatchIndex,
    ids: Vec<CString>,
    positions: HashMap<String, usize>,
}

impl PmIndex {
    fn wrap(index: MatchIndex) -> Result<Self, Failure> {
        let ids = index
            .entries()
            .iter()
            .map(|e| CString::new(e.offer_id.as_str()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure(PmStatus::InvalidArgument, format!("offer id: {e}")))?;
        let positions = index
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (e.offer_id.clone(), i))
            .collect();
        Ok(PmIndex {
            index,
            ids,
            positions,
        })
    }
}

/// One retrieved neighbour.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmCandidate {
    /// Position in the index; see `pm_index_offer_id`.
    pub position: usize,
    /// Cosine distance `1 - cos`.
    pub distance: f64,
    /// 1 when `distance <= distance_threshold`.
    pub accepted: c_int,
}

/// # Safety
/// `path` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pm_corpus_load(path: *const c_char, out: *mut *mut PmCorpus) -> PmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let corpus = ingest_offers(Path::new(path), &OfferFormat::Jsonl)?;
        *out = Box::into_raw(Box::new(PmCorpus { corpus }));
        Ok(())
    })
}

/// Number of offers; 0 for null.
///
/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pm_corpus_len(corpus: *const PmCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.corpus.len())
}

/// # Safety
/// `corpus` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn pm_corpus_free(corpus: *mut PmCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// # Safety
/// `path` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pm_head_load(path: *const c_char, out: *mut *mut PmHead) -> PmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let head = read_head(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(PmHead { head }));
        Ok(())
    })
}

/// Embedding dimension; 0 for null.
///
/// # Safety
/// `head` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pm_head_output_dim(head: *const PmHead) -> usize {
    head.as_ref().map_or(0, |h| h.head.output_dim())
}

/// # Safety
/// `head` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn pm_head_free(head: *mut PmHead) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

/// Writes the unit embedding of offer `offer` of `corpus` to `out[0..out_len]`;
/// `out_len` must be at least `pm_head_output_dim(head)`.
///
/// # Safety
/// Handles must be live; `out` must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pm_embed_offer(
    head: *const PmHead,
    corpus: *const PmCorpus,
    offer: usize,
    out: *mut f64,
    out_len: usize,
) -> PmStatus {
    guard(|| {
        let head = &ref_arg(head, "head")?.head;
        let corpus = &ref_arg(corpus, "corpus")?.corpus;
        if out.is_null() {
            return Err(null("out"));
        }
        let d = head.output_dim();
        if out_len < d {
            return Err(Failure(
                PmStatus::BufferTooSmall,
                format!("need {d} doubles, got {out_len}"),
            ));
        }
        let o = corpus.offers().get(offer).ok_or_else(|| {
            Failure(
                PmStatus::NotFound,
                format!("offer {offer} out of range for {} offers", corpus.len()),
            )
        })?;
        let v = head.project(&fuse(o, head)?)?;
        std::slice::from_raw_parts_mut(out, d).copy_from_slice(&v);
        Ok(())
    })
}

/// Embeds every offer of `corpus` with `head` and indexes them.
///
/// # Safety
/// Handles must be live; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pm_index_build(
    head: *const PmHead,
    corpus: *const PmCorpus,
    out: *mut *mut PmIndex,
) -> PmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let head = &ref_arg(head, "head")?.head;
        let corpus = &ref_arg(corpus, "corpus")?.corpus;
        let emb = embed_corpus(corpus, head)?;
        let index = PmIndex::wrap(MatchIndex::build(&emb, corpus)?)?;
        *out = Box::into_raw(Box::new(index));
        Ok(())
    })
}

/// Loads an index file written by `prodmatch index`.
///
/// # Safety
/// `path` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pm_index_load(path: *const c_char, out: *mut *mut PmIndex) -> PmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let index = PmIndex::wrap(read_index(Path::new(str_arg(path, "path")?))?)?;
        *out = Box::into_raw(Box::new(index));
        Ok(())
    })
}

/// Number of indexed offers; 0 for null.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pm_index_len(index: *const PmIndex) -> usize {
    index.as_ref().map_or(0, |i| i.index.len())
}

/// Offer id at `position`, or null when out of range. Owned by the index.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pm_index_offer_id(index: *const PmIndex, position: usize) -> *const c_char {
    index
        .as_ref()
        .and_then(|i| i.ids.get(position))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Brand-blocked exact kNN for one unit query vector. Writes up to `capacity`
/// candidates, nearest first, and their count to `written`.
///
/// # Safety
/// `index` must be live; `brand` a valid C string; `query` must point to `dim`
/// doubles, `out` to `capacity` writable candidates.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pm_index_query(
    index: *const PmIndex,
    brand: *const c_char,
    query: *const f64,
    dim: usize,
    k: usize,
    brand_threshold: f64,
    distance_threshold: f64,
    out: *mut PmCandidate,
    capacity: usize,
    written: *mut usize,
) -> PmStatus {
    guard(|| {
        let written = out_arg(written, "written")?;
        *written = 0;
        let idx = ref_arg(index, "index")?;
        let brand = str_arg(brand, "brand")?;
        if query.is_null() {
            return Err(null("query"));
        }
        if !idx.index.is_empty() && dim != idx.index.dim() {
            return Err(Failure(
                PmStatus::Dimension,
                format!("query has dimension {dim}, index {}", idx.index.dim()),
            ));
        }
        if !(0.0..=1.0).contains(&brand_threshold) || !(0.0..=2.0).contains(&distance_threshold) {
            return Err(Failure(
                PmStatus::InvalidArgument,
                format!("thresholds out of range: brand {brand_threshold}, distance {distance_threshold}"),
            ));
        }
        let q = ndarray::ArrayView1::from(std::slice::from_raw_parts(query, dim));
        let block = brand_block(brand, &idx.index, brand_threshold);
        let found = discriminate(knn(q, &idx.index, &block, k), distance_threshold);
        if found.len() > capacity {
            return Err(Failure(
                PmStatus::BufferTooSmall,
                format!("{} candidates, capacity {capacity}", found.len()),
            ));
        }
        if !found.is_empty() && out.is_null() {
            return Err(null("out"));
        }
        for (i, c) in found.iter().enumerate() {
            *out.add(i) = PmCandidate {
                position: idx.positions[&c.index_offer_id],
                distance: c.distance,
                accepted: c_int::from(c.accepted),
            };
        }
        *written = found.len();
        Ok(())
    })
}

/// # Safety
/// `index` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn pm_index_free(index: *mut PmIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Normalized text feature of a brand and title; free with `pm_string_free`.
///
/// # Safety
/// `brand` and `title` must be valid C strings; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pm_normalize_text(
    brand: *const c_char,
    title: *const c_char,
    out: *mut *mut c_char,
) -> PmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let text = normalize_text(str_arg(brand, "brand")?, str_arg(title, "title")?);
        let c = CString::new(text)
            .map_err(|e| Failure(PmStatus::InvalidArgument, e.to_string()))?;
        *out = c.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not freed before.
#[no_mangle]
pub unsafe extern "C" fn pm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Jaro-Winkler similarity in `[0, 1]`.
///
/// # Safety
/// `a` and `b` must be valid C strings; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pm_jaro_winkler(a: *const c_char, b: *const c_char, out: *mut f64) -> PmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = jaro_winkler(str_arg(a, "a")?, str_arg(b, "b")?);
        Ok(())
    })
}

/// `TPR / FPR`. When FPR is 0 and TPR positive, `*infinite` is set to 1 and
/// `*out` to `INFINITY`.
///
/// # Safety
/// `out` and `infinite` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pm_lr_plus(tpr: f64, fpr: f64, out: *mut f64, infinite: *mut c_int) -> PmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let infinite = out_arg(infinite, "infinite")?;
        let lr = lr_plus_from(tpr, fpr)?;
        *infinite = c_int::from(lr == LrPlus::Infinite);
        *out = lr.value();
        Ok(())
    })
}

/// `1 / (1 + (1/p_model - 1) / lr_plus)`; pass `lr_infinite = 1` for an
/// infinite ratio (then `lr_plus` is ignored).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pm_predict_hitl_precision(
    p_model: f64,
    lr_plus: f64,
    lr_infinite: c_int,
    out: *mut f64,
) -> PmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let lr = if lr_infinite != 0 {
            LrPlus::Infinite
        } else {
            LrPlus::Finite(lr_plus)
        };
        *out = predict_hitl_precision(p_model, lr)?;
        Ok(())
    })
}
