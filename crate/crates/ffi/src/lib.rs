//! C ABI over `kdlaplace`.
//!
//! Every function returns a [`KdStatus`]; on failure a message is available
//! from [`kd_last_error`] on the same thread. Objects cross the boundary as
//! opaque handles that the caller releases with the matching `*_free`.
//! Panics never unwind into C: they are caught and reported as
//! `KD_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use kdlaplace::data::{self, Example, GeneratorSpec};
use kdlaplace::distill::{distill_dedier, distill_laplace, train_teacher, StrategyKind, TrainingConfig};
use kdlaplace::laplace::{entropy_weight, predictive_entropy, LaplacePosterior};
use kdlaplace::metrics::{evaluate_groups, features_at};
use kdlaplace::network::{Checkpoint, Mlp};
use kdlaplace::numerics::{softmax, RngStream};
use kdlaplace::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numerical = 4,
    DimMismatch = 5,
    Parse = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdStrategy {
    Uniform = 0,
    Margin = 1,
    Laplace = 2,
}

/// Mirror of the generator spec with C layout.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct KdGeneratorSpec {
    pub n: usize,
    pub num_classes: usize,
    pub core_dim: usize,
    pub spurious_dim: usize,
    pub rho: f64,
    pub core_separation: f64,
    pub spurious_separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl From<KdGeneratorSpec> for GeneratorSpec {
    fn from(s: KdGeneratorSpec) -> Self {
        GeneratorSpec {
            n: s.n,
            num_classes: s.num_classes,
            core_dim: s.core_dim,
            spurious_dim: s.spurious_dim,
            rho: s.rho,
            core_separation: s.core_separation,
            spurious_separation: s.spurious_separation,
            noise_std: s.noise_std,
            seed: s.seed,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct KdGroupSummary {
    pub average_accuracy: f64,
    pub worst_group_accuracy: f64,
    pub worst_group_id: usize,
    pub total: usize,
}

/// Opaque list of examples.
pub struct KdDataset {
    examples: Vec<Example>,
}

/// Opaque network plus the aux head and exit depth a student carries.
pub struct KdModel {
    checkpoint: Checkpoint,
    net: Mlp,
}

/// Opaque Laplace posterior over a student's aux head.
pub struct KdPosterior {
    posterior: LaplacePosterior,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> KdStatus {
    match e {
        Error::Io { .. } => KdStatus::Io,
        Error::NotPositiveDefinite { .. } | Error::NotSymmetric { .. } => KdStatus::Numerical,
        Error::DimMismatch { .. } | Error::ShapeMismatch(_) => KdStatus::DimMismatch,
        Error::Parse { .. } | Error::Checkpoint(_) => KdStatus::Parse,
        _ => KdStatus::InvalidArgument,
    }
}

struct Fail(KdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(KdStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            KdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            KdStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(KdStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn config_arg(p: *const c_char) -> Result<TrainingConfig, Fail> {
    if p.is_null() {
        return Ok(TrainingConfig::default());
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(KdStatus::InvalidArgument, "config is not UTF-8".into()))?;
    Ok(TrainingConfig::from_toml(s)?)
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out(src: &[f64], out: *mut f64, out_len: usize) -> Result<(), Fail> {
    if out_len < src.len() {
        return Err(Fail(
            KdStatus::BufferTooSmall,
            format!("output buffer holds {out_len} values, need {}", src.len()),
        ));
    }
    if src.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(null("output buffer"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

// ---- errors and version -------------------------------------------------

/// Message for the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn kd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn kd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---- datasets -----------------------------------------------------------

#[no_mangle]
pub unsafe extern "C" fn kd_generator_spec_default(out: *mut KdGeneratorSpec) -> KdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("spec"))?;
        let d = GeneratorSpec::default();
        *out = KdGeneratorSpec {
            n: d.n,
            num_classes: d.num_classes,
            core_dim: d.core_dim,
            spurious_dim: d.spurious_dim,
            rho: d.rho,
            core_separation: d.core_separation,
            spurious_separation: d.spurious_separation,
            noise_std: d.noise_std,
            seed: d.seed,
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_dataset_generate(spec: *const KdGeneratorSpec, out: *mut *mut KdDataset) -> KdStatus {
    guard(|| {
        let spec: GeneratorSpec = (*deref(spec, "spec")?).into();
        put(out, KdDataset { examples: data::generate(&spec)? })
    })
}

/// Group-balanced draw with `per_group` examples in every (label, attribute) cell.
#[no_mangle]
pub unsafe extern "C" fn kd_dataset_generate_balanced(
    spec: *const KdGeneratorSpec,
    per_group: usize,
    out: *mut *mut KdDataset,
) -> KdStatus {
    guard(|| {
        let spec: GeneratorSpec = (*deref(spec, "spec")?).into();
        put(out, KdDataset { examples: data::generate_balanced(&spec, per_group)? })
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_dataset_load(path: *const c_char, out: *mut *mut KdDataset) -> KdStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        put(out, KdDataset { examples: data::load(&path)? })
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_dataset_save(ds: *const KdDataset, path: *const c_char) -> KdStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        let path = path_arg(path, "path")?;
        Ok(data::save(&path, &ds.examples, None)?)
    })
}

/// Number of examples; 0 for a NULL handle.
#[no_mangle]
pub unsafe extern "C" fn kd_dataset_len(ds: *const KdDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.examples.len())
}

/// Feature width; 0 for a NULL or empty dataset.
#[no_mangle]
pub unsafe extern "C" fn kd_dataset_feature_dim(ds: *const KdDataset) -> usize {
    ds.as_ref()
        .and_then(|d| d.examples.first())
        .map_or(0, |e| e.features.len())
}

/// Copies example `index` into caller buffers. Any of `label`, `group` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn kd_dataset_example(
    ds: *const KdDataset,
    index: usize,
    features: *mut f64,
    features_len: usize,
    label: *mut usize,
    group: *mut usize,
) -> KdStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        let e = ds.examples.get(index).ok_or_else(|| {
            Fail(
                KdStatus::InvalidArgument,
                format!("index {index} out of range for {} examples", ds.examples.len()),
            )
        })?;
        write_out(&e.features, features, features_len)?;
        if let Some(l) = label.as_mut() {
            *l = e.label;
        }
        if let Some(g) = group.as_mut() {
            *g = e.group;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_dataset_free(ds: *mut KdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

// ---- models -------------------------------------------------------------

impl KdModel {
    fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self, Fail> {
        let net = checkpoint.to_model()?;
        Ok(Self { checkpoint, net })
    }
}

#[no_mangle]
pub unsafe extern "C" fn kd_model_load(path: *const c_char, out: *mut *mut KdModel) -> KdStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        put(out, KdModel::from_checkpoint(Checkpoint::load(&path)?)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_model_save(model: *const KdModel, path: *const c_char) -> KdStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let path = path_arg(path, "path")?;
        Ok(m.checkpoint.save(&path)?)
    })
}

/// Trains a teacher on the whole dataset. `config_toml` may be NULL for defaults.
#[no_mangle]
pub unsafe extern "C" fn kd_train_teacher(
    ds: *const KdDataset,
    config_toml: *const c_char,
    out: *mut *mut KdModel,
) -> KdStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        let cfg = config_arg(config_toml)?;
        let net = train_teacher(&ds.examples, &cfg)?;
        let checkpoint = Checkpoint::from_model("teacher", &net, &cfg.fingerprint());
        put(out, KdModel { checkpoint, net })
    })
}

/// Distills a student on the whole dataset. `strategy` is a [`KdStrategy`]
/// value and overrides the config's.
#[no_mangle]
pub unsafe extern "C" fn kd_distill(
    teacher: *const KdModel,
    ds: *const KdDataset,
    strategy: i32,
    config_toml: *const c_char,
    out: *mut *mut KdModel,
) -> KdStatus {
    guard(|| {
        let teacher = deref(teacher, "teacher")?;
        let ds = deref(ds, "dataset")?;
        let mut cfg = config_arg(config_toml)?;
        cfg.strategy = match strategy {
            s if s == KdStrategy::Uniform as i32 => StrategyKind::Uniform,
            s if s == KdStrategy::Margin as i32 => StrategyKind::Margin,
            s if s == KdStrategy::Laplace as i32 => StrategyKind::LaplaceEntropy,
            s => return Err(Fail(KdStatus::InvalidArgument, format!("unknown strategy {s}"))),
        };
        let outcome = match cfg.strategy {
            StrategyKind::LaplaceEntropy => distill_laplace(&teacher.net, &ds.examples, &cfg, None)?,
            _ => distill_dedier(&teacher.net, &ds.examples, &cfg, None)?,
        };
        let mut checkpoint = Checkpoint::from_model("student", &outcome.student, &cfg.fingerprint());
        checkpoint.exit_depth = outcome.aux_head.is_some().then_some(cfg.exit_depth);
        checkpoint.aux_head = outcome.aux_head;
        put(out, KdModel { checkpoint, net: outcome.student })
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_model_input_dim(model: *const KdModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.input_dim())
}

#[no_mangle]
pub unsafe extern "C" fn kd_model_num_classes(model: *const KdModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.num_classes())
}

/// Whether the model carries an aux head (students trained with a
/// non-uniform strategy do).
#[no_mangle]
pub unsafe extern "C" fn kd_model_has_aux(model: *const KdModel) -> bool {
    model.as_ref().is_some_and(|m| m.checkpoint.aux_head.is_some())
}

/// Writes `num_classes` logits for one input.
#[no_mangle]
pub unsafe extern "C" fn kd_model_logits(
    model: *const KdModel,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> KdStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let x = slice_arg(x, x_len, "input")?;
        write_out(&m.net.logits(x)?, out, out_len)
    })
}

/// Softmax probabilities at temperature `temp` for one input.
#[no_mangle]
pub unsafe extern "C" fn kd_model_predict(
    model: *const KdModel,
    x: *const f64,
    x_len: usize,
    temp: f64,
    out: *mut f64,
    out_len: usize,
) -> KdStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let x = slice_arg(x, x_len, "input")?;
        if temp.is_nan() || temp <= 0.0 {
            return Err(Fail(KdStatus::InvalidArgument, format!("temperature {temp} must be > 0")));
        }
        write_out(&softmax(&m.net.logits(x)?, temp), out, out_len)
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_evaluate(
    model: *const KdModel,
    ds: *const KdDataset,
    out: *mut KdGroupSummary,
) -> KdStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let ds = deref(ds, "dataset")?;
        let out = out.as_mut().ok_or_else(|| null("summary"))?;
        let r = evaluate_groups(&m.net, &ds.examples)?;
        *out = KdGroupSummary {
            average_accuracy: r.average_accuracy,
            worst_group_accuracy: r.worst_group_accuracy,
            worst_group_id: r.worst_group_id,
            total: r.total,
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_model_free(model: *mut KdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---- Laplace posterior --------------------------------------------------

/// Fits the covariance of the student's exit features over `ds` around its
/// aux head. The model must carry an aux head.
#[no_mangle]
pub unsafe extern "C" fn kd_posterior_fit(
    model: *const KdModel,
    ds: *const KdDataset,
    out: *mut *mut KdPosterior,
) -> KdStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let ds = deref(ds, "dataset")?;
        let (head, depth) = match (&m.checkpoint.aux_head, m.checkpoint.exit_depth) {
            (Some(h), Some(d)) => (h.clone(), d),
            _ => return Err(Fail(KdStatus::InvalidArgument, "model has no aux head".into())),
        };
        let features = features_at(&m.net, &ds.examples, depth)?;
        let posterior = LaplacePosterior::fit(head, &features, Default::default())?;
        put(out, KdPosterior { posterior })
    })
}

/// Width of the feature vectors the posterior expects.
#[no_mangle]
pub unsafe extern "C" fn kd_posterior_feature_dim(post: *const KdPosterior) -> usize {
    post.as_ref().map_or(0, |p| p.posterior.head().feature_dim())
}

/// Logit mean (`num_classes` values) and isotropic variance for features `phi`.
#[no_mangle]
pub unsafe extern "C" fn kd_posterior_predictive(
    post: *const KdPosterior,
    phi: *const f64,
    phi_len: usize,
    mu: *mut f64,
    mu_len: usize,
    sigma2: *mut f64,
) -> KdStatus {
    guard(|| {
        let p = deref(post, "posterior")?;
        let phi = slice_arg(phi, phi_len, "features")?;
        let sigma2 = sigma2.as_mut().ok_or_else(|| null("sigma2"))?;
        let pred = p.posterior.predictive(phi)?;
        write_out(&pred.mu, mu, mu_len)?;
        *sigma2 = pred.sigma2;
        Ok(())
    })
}

/// Entropy (nats) of the Monte-Carlo averaged softmax at temperature 1,
/// sampled from a stream seeded with `seed`.
#[no_mangle]
pub unsafe extern "C" fn kd_posterior_entropy(
    post: *const KdPosterior,
    phi: *const f64,
    phi_len: usize,
    samples: usize,
    seed: u64,
    entropy: *mut f64,
) -> KdStatus {
    guard(|| {
        let p = deref(post, "posterior")?;
        let phi = slice_arg(phi, phi_len, "features")?;
        let entropy = entropy.as_mut().ok_or_else(|| null("entropy"))?;
        let pred = p.posterior.predictive(phi)?;
        *entropy = predictive_entropy(&pred, samples, 1.0, &mut RngStream::new(seed));
        Ok(())
    })
}

/// JSON diagnostics (head, covariance, ridge, eigenvalue summary). Free the
/// string with [`kd_string_free`].
#[no_mangle]
pub unsafe extern "C" fn kd_posterior_dump_json(post: *const KdPosterior, out: *mut *mut c_char) -> KdStatus {
    guard(|| {
        let p = deref(post, "posterior")?;
        if out.is_null() {
            return Err(null("output string"));
        }
        let json = serde_json::to_string(&p.posterior.dump()).expect("dump serializes");
        *out = CString::new(json).expect("json has no nul").into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_posterior_free(post: *mut KdPosterior) {
    if !post.is_null() {
        drop(Box::from_raw(post));
    }
}

// ---- weights ------------------------------------------------------------

/// `exp(beta·H^alpha)` clamped to `[1, cap]`.
#[no_mangle]
pub unsafe extern "C" fn kd_entropy_weight(h: f64, beta: f64, alpha: f64, cap: f64, out: *mut f64) -> KdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("output"))?;
        *out = entropy_weight(h, beta, alpha, cap)?;
        Ok(())
    })
}
