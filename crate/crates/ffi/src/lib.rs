//! C ABI over `idea-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_load` and
//! released by the matching `*_free`. Every fallible call returns an
//! [`IdeaStatus`]; on failure the message is available from
//! [`idea_last_error`] on the same thread. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use idea::attack::Victim;
use idea::checkpoint::Checkpoint;
use idea::data::DatasetBundle;
use idea::error::Error;
use idea::eval::{scenario_accuracy, AttackBank, Pretrained, Scenario};
use idea::losses::pearson_correlation;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdeaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    MissingFile = 3,
    Format = 4,
    Checkpoint = 5,
    UnknownScenario = 6,
    BufferSize = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdeaSplit {
    Train = 0,
    Val = 1,
    Test = 2,
}

/// A loaded dataset with its split.
pub struct IdeaDataset {
    bundle: DatasetBundle,
}

/// A trained model restored from a checkpoint directory.
pub struct IdeaModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> IdeaStatus {
    match e {
        Error::MissingFile(_) => IdeaStatus::MissingFile,
        Error::Parse { .. } | Error::Format { .. } | Error::Json(_) | Error::Io { .. } => IdeaStatus::Format,
        Error::Checkpoint(_) => IdeaStatus::Checkpoint,
        Error::UnknownScenario { .. } => IdeaStatus::UnknownScenario,
        _ => IdeaStatus::InvalidArgument,
    }
}

struct Fail(IdeaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IdeaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IdeaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            IdeaStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(IdeaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(IdeaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null("output buffer"));
    }
    if len != need {
        return Err(Fail(IdeaStatus::BufferSize, format!("output buffer holds {len} values, need {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn idea_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn idea_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a dataset directory. A missing split file is drawn from `seed`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn idea_dataset_load(dir: *const c_char, seed: u64, out: *mut *mut IdeaDataset) -> IdeaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let bundle = DatasetBundle::load(&dir, seed)?;
        *out = Box::into_raw(Box::new(IdeaDataset { bundle }));
        Ok(())
    })
}

/// # Safety
/// `data` must come from [`idea_dataset_load`] and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn idea_dataset_free(data: *mut IdeaDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Number of nodes, or 0 for NULL.
///
/// # Safety
/// `data` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn idea_dataset_num_nodes(data: *const IdeaDataset) -> usize {
    data.as_ref().map_or(0, |d| d.bundle.graph.num_nodes())
}

/// Number of classes, or 0 for NULL.
///
/// # Safety
/// `data` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn idea_dataset_num_classes(data: *const IdeaDataset) -> usize {
    data.as_ref().map_or(0, |d| d.bundle.graph.num_classes())
}

/// Restores a model from a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn idea_model_load(dir: *const c_char, out: *mut *mut IdeaModel) -> IdeaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let checkpoint = Checkpoint::load(&dir)?;
        *out = Box::into_raw(Box::new(IdeaModel { checkpoint }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`idea_model_load`] and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn idea_model_free(model: *mut IdeaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Latent width of the model, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn idea_model_latent_dim(model: *const IdeaModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.model.arch.latent)
}

fn check_compatible(model: &IdeaModel, data: &IdeaDataset) -> Result<(), Fail> {
    let arch = &model.checkpoint.model.arch;
    let g = &data.bundle.graph;
    if arch.num_features != g.num_features() || arch.num_classes != g.num_classes() {
        return Err(Fail(
            IdeaStatus::InvalidArgument,
            format!(
                "model expects {} features and {} classes, dataset has {} and {}",
                arch.num_features,
                arch.num_classes,
                g.num_features(),
                g.num_classes()
            ),
        ));
    }
    Ok(())
}

/// Class probabilities for every node, row-major into `out` (`len` must be
/// nodes × classes).
///
/// # Safety
/// Handles must be live; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn idea_model_predict(
    model: *const IdeaModel,
    data: *const IdeaDataset,
    out: *mut f64,
    len: usize,
) -> IdeaStatus {
    guard(|| {
        let (m, d) = (ref_arg(model, "model")?, ref_arg(data, "dataset")?);
        check_compatible(m, d)?;
        let g = &d.bundle.graph;
        let buf = out_slice(out, len, g.num_nodes() * g.num_classes())?;
        let p = m.checkpoint.model.predict(g);
        for (o, v) in buf.iter_mut().zip(p.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Latent means for every node, row-major into `out` (`len` must be
/// nodes × latent dim).
///
/// # Safety
/// Handles must be live; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn idea_model_embed(
    model: *const IdeaModel,
    data: *const IdeaDataset,
    out: *mut f64,
    len: usize,
) -> IdeaStatus {
    guard(|| {
        let (m, d) = (ref_arg(model, "model")?, ref_arg(data, "dataset")?);
        check_compatible(m, d)?;
        let g = &d.bundle.graph;
        let buf = out_slice(out, len, g.num_nodes() * m.checkpoint.model.arch.latent)?;
        let z = m.checkpoint.model.embed(g);
        for (o, v) in buf.iter_mut().zip(z.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Accuracy on the labeled nodes of one split.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn idea_model_accuracy(
    model: *const IdeaModel,
    data: *const IdeaDataset,
    split: IdeaSplit,
    out: *mut f64,
) -> IdeaStatus {
    guard(|| {
        let (m, d) = (ref_arg(model, "model")?, ref_arg(data, "dataset")?);
        if out.is_null() {
            return Err(null("out"));
        }
        check_compatible(m, d)?;
        let s = &d.bundle.splits;
        let g = &d.bundle.graph;
        let nodes: Vec<usize> = match split {
            IdeaSplit::Train => s.train.clone(),
            IdeaSplit::Val => s.val.clone(),
            IdeaSplit::Test => s.labeled_test(g),
        };
        *out = idea::train::model_accuracy(&m.checkpoint.model, g, &nodes)?;
        Ok(())
    })
}

/// Accuracy under one named scenario (e.g. `clean`, `feature_pgd`,
/// `random_poison:0.2`). Evasion scenarios attack the targets drawn from
/// `seed` with a fraction of 0.2; poisoning scenarios retrain from the
/// checkpoint's configuration.
///
/// # Safety
/// Handles must be live; `scenario` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn idea_evaluate(
    model: *const IdeaModel,
    data: *const IdeaDataset,
    scenario: *const c_char,
    seed: u64,
    out: *mut f64,
) -> IdeaStatus {
    guard(|| {
        let (m, d) = (ref_arg(model, "model")?, ref_arg(data, "dataset")?);
        let scenario = Scenario::parse(str_arg(scenario, "scenario")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        check_compatible(m, d)?;
        let trainer = Pretrained {
            model: m.checkpoint.model.clone(),
            config: m.checkpoint.config.clone(),
        };
        let mut bank = AttackBank::default();
        *out = scenario_accuracy(&trainer, &m.checkpoint.model, &d.bundle, &scenario, seed, &mut bank)?;
        Ok(())
    })
}

/// Pearson correlation of two length-`n` vectors.
///
/// # Safety
/// `x` and `y` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn idea_pearson(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> IdeaStatus {
    guard(|| {
        if x.is_null() || y.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let (x, y) = (std::slice::from_raw_parts(x, n), std::slice::from_raw_parts(y, n));
        *out = pearson_correlation(x, y)?;
        Ok(())
    })
}
