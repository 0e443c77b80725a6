//! C ABI for `imblens`.
//!
//! Objects cross the boundary as opaque handles created by `*_read` or
//! `*_from_raw` and released with the matching `*_free`. Every fallible
//! function returns an [`ImblensStatus`]; on failure a description is kept in
//! thread-local storage and can be fetched with
//! [`imblens_last_error_message`]. Strings handed out by this library are
//! owned by the caller and must be released with [`imblens_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use imblens::class_stats::{self, ProfileOptions};
use imblens::divergence::{self, OverlapOptions, RankBy};
use imblens::embx::{self, read_embeddings, read_head};
use imblens::probe::{self, Init, TrainConfig};
use imblens::topk::{self, FeMode, TopKRequest};
use imblens::{decompose, ClassifierHead, EmbeddingSet, Error, Matrix, ReadOptions, Split};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImblensStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Malformed EMBX directory or invalid tensor contents.
    InvalidInput = 3,
    DimensionMismatch = 4,
    EmptyInput = 5,
    /// Retraining produced a non-finite loss or parameters.
    Divergence = 6,
    Io = 7,
    /// A Rust panic was caught at the boundary.
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImblensSpace {
    Ce = 0,
    Fe = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImblensFeMode {
    Magnitude = 0,
    CeAligned = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImblensGroupBy {
    Predicted = 0,
    True = 1,
}

/// Settings for [`imblens_retrain`]. Start from
/// [`imblens_train_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImblensTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Cosine decay target, ignored when `constant_learning_rate` is set.
    pub final_learning_rate: f64,
    pub constant_learning_rate: bool,
    pub weight_decay: f64,
    pub seed: u64,
    /// Uniform `±1/sqrt(H)` weights instead of zeros.
    pub scaled_uniform_init: bool,
    pub class_balanced_loss: bool,
}

/// Opaque feature embedding set.
pub struct ImblensEmbeddings(EmbeddingSet);

/// Opaque linear classifier head.
pub struct ImblensHead(ClassifierHead);

enum Failure {
    Null(&'static str),
    Argument(String),
    Core(Error),
    Panic(String),
}

impl Failure {
    fn status(&self) -> ImblensStatus {
        match self {
            Failure::Null(_) => ImblensStatus::NullPointer,
            Failure::Argument(_) => ImblensStatus::InvalidArgument,
            Failure::Panic(_) => ImblensStatus::Panic,
            Failure::Core(e) => match e {
                Error::InvalidArgument(_) => ImblensStatus::InvalidArgument,
                Error::DimensionMismatch(_) => ImblensStatus::DimensionMismatch,
                Error::EmptyInput(_) => ImblensStatus::EmptyInput,
                Error::Divergence { .. } => ImblensStatus::Divergence,
                Error::Io { .. } => ImblensStatus::Io,
                _ => ImblensStatus::InvalidInput,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Null(what) => format!("NullPointer: `{what}` is null"),
            Failure::Argument(m) => format!("InvalidArgument: {m}"),
            Failure::Core(e) => e.to_string(),
            Failure::Panic(m) => format!("Panic: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> ImblensStatus {
    let outcome = panic::catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure::Panic(msg))
    });
    match outcome {
        Ok(()) => ImblensStatus::Ok,
        Err(f) => {
            set_last_error(f.message());
            f.status()
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Argument(format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn checked_len(a: usize, b: usize) -> Result<usize, Failure> {
    a.checked_mul(b)
        .ok_or_else(|| Failure::Argument(format!("{a} x {b} overflows")))
}

unsafe fn put<T>(out: *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_json(out: *mut *mut c_char, value: serde_json::Value) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out_json"));
    }
    let text = serde_json::to_string(&value).expect("report serializes");
    out.write(CString::new(text).expect("JSON has no NUL").into_raw());
    Ok(())
}

fn to_value(v: impl serde::Serialize) -> serde_json::Value {
    serde_json::to_value(v).expect("report serializes")
}

fn ranking(space: ImblensSpace, fe_mode: ImblensFeMode) -> topk::Ranking {
    topk::Ranking {
        space: match space {
            ImblensSpace::Ce => topk::Space::Ce,
            ImblensSpace::Fe => topk::Space::Fe,
        },
        fe_mode: match fe_mode {
            ImblensFeMode::Magnitude => FeMode::Magnitude,
            ImblensFeMode::CeAligned => FeMode::CeAligned,
        },
    }
}

fn group_by(g: ImblensGroupBy) -> topk::GroupBy {
    match g {
        ImblensGroupBy::Predicted => topk::GroupBy::Predicted,
        ImblensGroupBy::True => topk::GroupBy::True,
    }
}

/// Message of the last failed call on this thread, or null when none failed.
/// Release with [`imblens_string_free`].
#[no_mangle]
pub extern "C" fn imblens_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |m| m.clone().into_raw()))
}

/// Forgets the last error recorded on this thread.
#[no_mangle]
pub extern "C" fn imblens_clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn imblens_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn imblens_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads an EMBX embeddings directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imblens_embeddings_read(
    dir: *const c_char,
    allow_signed_fe: bool,
    out: *mut *mut ImblensEmbeddings,
) -> ImblensStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let es = read_embeddings(&dir, &ReadOptions { allow_signed_fe })?;
        put(out, Box::into_raw(Box::new(ImblensEmbeddings(es))), "out")
    })
}

/// Builds an embedding set from row-major `fe` (`n * h` floats) and `n`
/// labels. The data is copied.
///
/// # Safety
/// `fe` and `labels` must point to at least `n * h` and `n` elements.
#[no_mangle]
pub unsafe extern "C" fn imblens_embeddings_from_raw(
    fe: *const f32,
    labels: *const i64,
    n: usize,
    h: usize,
    num_classes: usize,
    out: *mut *mut ImblensEmbeddings,
) -> ImblensStatus {
    guard(|| {
        let fe = slice_arg(fe, checked_len(n, h)?, "fe")?;
        let raw = slice_arg(labels, n, "labels")?;
        let mut labels = Vec::with_capacity(n);
        for (index, &label) in raw.iter().enumerate() {
            if label < 0 || label as u64 >= num_classes as u64 {
                return Err(Error::LabelOutOfRange {
                    index,
                    label,
                    num_classes,
                }
                .into());
            }
            labels.push(label as usize);
        }
        let fe = Matrix::from_vec(n, h, fe.to_vec())?;
        let es = EmbeddingSet::new(fe, labels, num_classes, Split::Other)?;
        put(out, Box::into_raw(Box::new(ImblensEmbeddings(es))), "out")
    })
}

/// Writes the set as an EMBX directory.
///
/// # Safety
/// `es` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn imblens_embeddings_write(es: *const ImblensEmbeddings, dir: *const c_char) -> ImblensStatus {
    guard(|| {
        let es = borrow(es, "es")?;
        embx::write_embeddings(&es.0, &path_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// Instance count, feature dimension and class count. Any output may be null.
///
/// # Safety
/// `es` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn imblens_embeddings_shape(
    es: *const ImblensEmbeddings,
    n: *mut usize,
    h: *mut usize,
    num_classes: *mut usize,
) -> ImblensStatus {
    guard(|| {
        let es = &borrow(es, "es")?.0;
        for (p, v) in [(n, es.len()), (h, es.dim()), (num_classes, es.num_classes())] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `es` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn imblens_embeddings_free(es: *mut ImblensEmbeddings) {
    if !es.is_null() {
        drop(Box::from_raw(es));
    }
}

/// Reads an EMBX classifier head directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imblens_head_read(dir: *const c_char, out: *mut *mut ImblensHead) -> ImblensStatus {
    guard(|| {
        let head = read_head(&path_arg(dir, "dir")?)?;
        put(out, Box::into_raw(Box::new(ImblensHead(head))), "out")
    })
}

/// Builds a head from row-major `weights` (`num_classes * h`) and an
/// optional `bias` of `num_classes` entries (null for none).
///
/// # Safety
/// Non-null pointers must cover the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn imblens_head_from_raw(
    weights: *const f32,
    bias: *const f32,
    num_classes: usize,
    h: usize,
    out: *mut *mut ImblensHead,
) -> ImblensStatus {
    guard(|| {
        let w = slice_arg(weights, checked_len(num_classes, h)?, "weights")?;
        let bias = (!bias.is_null()).then(|| std::slice::from_raw_parts(bias, num_classes).to_vec());
        let head = ClassifierHead::new(Matrix::from_vec(num_classes, h, w.to_vec())?, bias)?;
        put(out, Box::into_raw(Box::new(ImblensHead(head))), "out")
    })
}

/// Writes the head as an EMBX directory.
///
/// # Safety
/// `head` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn imblens_head_write(head: *const ImblensHead, dir: *const c_char) -> ImblensStatus {
    guard(|| {
        let head = borrow(head, "head")?;
        embx::write_head(&head.0, &path_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// Class count, feature dimension and whether a bias is present. Any output
/// may be null.
///
/// # Safety
/// `head` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn imblens_head_shape(
    head: *const ImblensHead,
    num_classes: *mut usize,
    h: *mut usize,
    has_bias: *mut bool,
) -> ImblensStatus {
    guard(|| {
        let head = &borrow(head, "head")?.0;
        if !num_classes.is_null() {
            num_classes.write(head.num_classes());
        }
        if !h.is_null() {
            h.write(head.dim());
        }
        if !has_bias.is_null() {
            has_bias.write(head.bias().is_some());
        }
        Ok(())
    })
}

/// # Safety
/// `head` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn imblens_head_free(head: *mut ImblensHead) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

/// Writes the `n * num_classes` logits (row-major, f64) into `out` and,
/// when `predictions` is non-null, the `n` predicted classes.
///
/// # Safety
/// `out` must hold `out_len` doubles; `predictions` (if non-null) `n` entries.
#[no_mangle]
pub unsafe extern "C" fn imblens_logits(
    es: *const ImblensEmbeddings,
    head: *const ImblensHead,
    out: *mut f64,
    out_len: usize,
    predictions: *mut usize,
) -> ImblensStatus {
    guard(|| {
        let (es, head) = (&borrow(es, "es")?.0, &borrow(head, "head")?.0);
        let d = decompose(es, head)?;
        let logits = d.logits().as_slice();
        if out_len != logits.len() {
            return Err(Failure::Argument(format!(
                "out_len is {out_len}, logits need {}",
                logits.len()
            )));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        ptr::copy_nonoverlapping(logits.as_ptr(), out, logits.len());
        if !predictions.is_null() {
            ptr::copy_nonoverlapping(d.predictions().as_ptr(), predictions, d.len());
        }
        Ok(())
    })
}

/// Balanced accuracy of the head's predictions against the set's labels.
///
/// # Safety
/// Handles must be live; `bac` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imblens_accuracy(
    es: *const ImblensEmbeddings,
    head: *const ImblensHead,
    bac: *mut f64,
) -> ImblensStatus {
    guard(|| {
        let (es, head) = (&borrow(es, "es")?.0, &borrow(head, "head")?.0);
        let d = decompose(es, head)?;
        put(bac, imblens::accuracy(&d, es.labels())?.bac, "bac")
    })
}

/// Full accuracy report (per-class recall, confusion matrix) as JSON.
///
/// # Safety
/// Handles must be live; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imblens_accuracy_json(
    es: *const ImblensEmbeddings,
    head: *const ImblensHead,
    out_json: *mut *mut c_char,
) -> ImblensStatus {
    guard(|| {
        let (es, head) = (&borrow(es, "es")?.0, &borrow(head, "head")?.0);
        let d = decompose(es, head)?;
        put_json(out_json, to_value(imblens::accuracy(&d, es.labels())?))
    })
}

/// Coverage ratios for each of `k_values`, class members and union counts at
/// the largest K, and the top-`contrib_k` logit contributions, as JSON
/// `{"coverage": ..., "contributions": ...}`.
///
/// # Safety
/// Handles must be live; `k_values` must hold `k_count` entries.
#[no_mangle]
pub unsafe extern "C" fn imblens_topk_json(
    es: *const ImblensEmbeddings,
    head: *const ImblensHead,
    k_values: *const usize,
    k_count: usize,
    space: ImblensSpace,
    fe_mode: ImblensFeMode,
    grouping: ImblensGroupBy,
    top_m: usize,
    contrib_k: usize,
    out_json: *mut *mut c_char,
) -> ImblensStatus {
    guard(|| {
        let (es, head) = (&borrow(es, "es")?.0, &borrow(head, "head")?.0);
        let k_values = slice_arg(k_values, k_count, "k_values")?.to_vec();
        let d = decompose(es, head)?;
        let req = TopKRequest {
            k_values,
            ranking: ranking(space, fe_mode),
            group_by: group_by(grouping),
            members_k: None,
            top_m,
        };
        let coverage = topk::coverage_ratios(&d, es.labels(), &req)?;
        let contributions = topk::logit_contributions(&d, es.labels(), contrib_k, group_by(grouping))?;
        put_json(
            out_json,
            serde_json::json!({ "coverage": to_value(coverage), "contributions": to_value(contributions) }),
        )
    })
}

/// Class mean profiles and weight summaries as JSON
/// `{"profiles": ..., "weights": ...}`.
///
/// # Safety
/// Handles must be live; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imblens_stats_json(
    es: *const ImblensEmbeddings,
    head: *const ImblensHead,
    grouping: ImblensGroupBy,
    activity_epsilon: f32,
    out_json: *mut *mut c_char,
) -> ImblensStatus {
    guard(|| {
        let (es, head) = (&borrow(es, "es")?.0, &borrow(head, "head")?.0);
        let d = decompose(es, head)?;
        let opts = ProfileOptions {
            group_by: group_by(grouping),
            activity_epsilon,
        };
        let profiles = class_stats::class_profiles(es, &d, &opts)?;
        let weights = class_stats::weight_summaries(head);
        put_json(
            out_json,
            serde_json::json!({ "profiles": to_value(profiles), "weights": to_value(weights) }),
        )
    })
}

/// Frobenius divergence and top-`top_m` identity overlap between `train`
/// and the TP/FP partitions of `test`, as JSON.
///
/// # Safety
/// Handles must be live; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imblens_divergence_json(
    train: *const ImblensEmbeddings,
    test: *const ImblensEmbeddings,
    head: *const ImblensHead,
    space: ImblensSpace,
    fe_mode: ImblensFeMode,
    top_m: usize,
    k: usize,
    out_json: *mut *mut c_char,
) -> ImblensStatus {
    guard(|| {
        let train = &borrow(train, "train")?.0;
        let test = &borrow(test, "test")?.0;
        let head = &borrow(head, "head")?.0;
        let d_train = decompose(train, head)?;
        let d_test = decompose(test, head)?;
        let opts = OverlapOptions {
            ranking: ranking(space, fe_mode),
            top_m,
            k,
            rank_by: RankBy::Topk,
            activity_epsilon: 0.0,
        };
        let report = divergence::divergence_report(train, test, &d_train, &d_test, &opts)?;
        put_json(out_json, to_value(report))
    })
}

#[no_mangle]
pub extern "C" fn imblens_train_config_default() -> ImblensTrainConfig {
    let d = TrainConfig::default();
    ImblensTrainConfig {
        epochs: d.epochs,
        learning_rate: d.learning_rate,
        final_learning_rate: d.final_learning_rate.unwrap_or(d.learning_rate),
        constant_learning_rate: d.final_learning_rate.is_none(),
        weight_decay: d.weight_decay,
        seed: d.seed,
        scaled_uniform_init: d.init == Init::ScaledUniform,
        class_balanced_loss: d.class_balanced_loss,
    }
}

/// Retrains a head on `train`, keeping the epoch with the best BAC on `eval`
/// (or on `train` when `eval` is null). The training trace is returned as
/// JSON through `out_trace_json` when it is non-null, including on
/// `IMBLENS_STATUS_DIVERGENCE`.
///
/// # Safety
/// `train` and `config` must be valid; `eval` may be null; `out_head` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn imblens_retrain(
    train: *const ImblensEmbeddings,
    config: *const ImblensTrainConfig,
    eval: *const ImblensEmbeddings,
    out_head: *mut *mut ImblensHead,
    out_trace_json: *mut *mut c_char,
) -> ImblensStatus {
    guard(|| {
        let train = &borrow(train, "train")?.0;
        let c = borrow(config, "config")?;
        if out_head.is_null() {
            return Err(Failure::Null("out_head"));
        }
        let eval = eval.as_ref().map(|e| &e.0);
        let cfg = TrainConfig {
            epochs: c.epochs,
            learning_rate: c.learning_rate,
            final_learning_rate: (!c.constant_learning_rate).then_some(c.final_learning_rate),
            weight_decay: c.weight_decay,
            seed: c.seed,
            init: if c.scaled_uniform_init {
                Init::ScaledUniform
            } else {
                Init::Zeros
            },
            class_balanced_loss: c.class_balanced_loss,
        };
        match probe::retrain_head(train, &cfg, eval) {
            Ok(trace) => {
                if !out_trace_json.is_null() {
                    put_json(out_trace_json, to_value(&trace))?;
                }
                out_head.write(Box::into_raw(Box::new(ImblensHead(trace.final_head))));
                Ok(())
            }
            Err(Error::Divergence { epoch, trace }) => {
                if !out_trace_json.is_null() {
                    put_json(out_trace_json, to_value(&*trace))?;
                }
                Err(Error::Divergence { epoch, trace }.into())
            }
            Err(e) => Err(e.into()),
        }
    })
}
