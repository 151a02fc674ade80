//! C ABI for uap-core.
//!
//! Every function returns an `int32_t` status (`UAP_OK` on success) and writes
//! results through out-pointers. On failure a description is kept per thread
//! and can be copied out with `uap_last_error`. Objects cross the boundary
//! as opaque handles that the caller releases with the matching `_free`.
//! Panics never unwind into C; they surface as `UAP_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use uap_core::attack::{run_attack, AttackConfig, Constraint, Norm, Perturbation, Strategy, DEFAULT_PATCH_FRACTION};
use uap_core::boundary::{
    binary_distance, binary_min_perturbation, cross_k_boundaries, multiclass_min_perturbation, nearest_boundary,
    LinearClassifier,
};
use uap_core::datagen::Dataset;
use uap_core::encoder::{Encoder, EncoderConfig};
use uap_core::eval::{evaluate, IR_RECALL, TR_RECALL};
use uap_core::retrieval::{indicator, EmbeddingIndex};
use uap_core::tensor::{project_l2, project_linf, Mask, Tensor};
use uap_core::Error;

pub const UAP_OK: i32 = 0;
pub const UAP_ERR_INVALID_ARGUMENT: i32 = 1;
pub const UAP_ERR_PRECONDITION: i32 = 2;
pub const UAP_ERR_DEGENERATE_ENCODING: i32 = 3;
pub const UAP_ERR_INTEGRITY: i32 = 4;
pub const UAP_ERR_CORRUPT_DATASET: i32 = 5;
pub const UAP_ERR_DEGENERATE_DATASET: i32 = 6;
pub const UAP_ERR_IO: i32 = 7;
pub const UAP_ERR_JSON: i32 = 8;
pub const UAP_ERR_NULL_POINTER: i32 = 9;
pub const UAP_ERR_PANIC: i32 = 10;

pub const UAP_STRATEGY_TRA: i32 = 0;
pub const UAP_STRATEGY_IRA: i32 = 1;
pub const UAP_STRATEGY_TIRA: i32 = 2;

pub const UAP_MODE_PATCH: i32 = 0;
pub const UAP_MODE_GLOBAL: i32 = 1;

pub const UAP_NORM_L2: i32 = 0;
pub const UAP_NORM_LINF: i32 = 1;

pub const UAP_ENCODER_LINEAR: i32 = 0;
pub const UAP_ENCODER_MLP: i32 = 1;

/// Opaque image encoder.
pub struct UapEncoder(Encoder);

/// Opaque dataset.
pub struct UapDataset(Dataset);

/// Opaque perturbation with its constraint and provenance.
pub struct UapPerturbation(Perturbation);

/// Attack settings. Fill with `uap_attack_config_default` and then adjust.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct UapAttackConfig {
    /// One of `UAP_STRATEGY_*`.
    pub strategy: i32,
    /// One of `UAP_MODE_*`.
    pub mode: i32,
    /// One of `UAP_NORM_*`; global mode only.
    pub norm: i32,
    /// Global budget; global mode only.
    pub epsilon: f64,
    /// Patch side in pixels, bottom-right corner; patch mode only.
    pub mask_side: usize,
    pub k: usize,
    pub eta: f64,
    pub epochs: usize,
    pub max_inner_iters: usize,
    pub batch_size: usize,
    pub probe_images: usize,
    pub seed: u64,
    /// Nonzero to visit samples in a seeded random order.
    pub shuffle: i32,
}

/// Clean and adversarial recall at one `k`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct UapRecall {
    pub tr_clean: f64,
    pub tr_adversarial: f64,
    pub ir_clean: f64,
    pub ir_adversarial: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => UAP_ERR_INVALID_ARGUMENT,
        Error::PreconditionViolation(_) => UAP_ERR_PRECONDITION,
        Error::DegenerateEncoding => UAP_ERR_DEGENERATE_ENCODING,
        Error::Integrity(_) => UAP_ERR_INTEGRITY,
        Error::CorruptDataset(_) => UAP_ERR_CORRUPT_DATASET,
        Error::DegenerateDataset(_) => UAP_ERR_DEGENERATE_DATASET,
        Error::Io(_) => UAP_ERR_IO,
        Error::Json(_) => UAP_ERR_JSON,
    }
}

/// Status code and message of a failed call.
struct Fail(i32, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type Out<T> = std::result::Result<T, Fail>;

fn guard(f: impl FnOnce() -> Out<()>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UAP_OK,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            UAP_ERR_PANIC
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(UAP_ERR_NULL_POINTER, format!("{what} is null"))
}

fn bad(msg: impl Into<String>) -> Fail {
    Fail(UAP_ERR_INVALID_ARGUMENT, msg.into())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Out<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Out<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn reference<'a, T>(p: *const T, what: &str) -> Out<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write<T>(p: *mut T, value: T, what: &str) -> Out<()> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(value);
    Ok(())
}

unsafe fn path(p: *const c_char) -> Out<PathBuf> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| bad("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn vector(data: &[f64]) -> Out<Tensor> {
    Ok(Tensor::from_vec(data.to_vec())?)
}

unsafe fn classifier(weights: *const f64, offsets: *const f64, classes: usize, dim: usize) -> Out<LinearClassifier> {
    let w = slice(weights, classes * dim, "weights")?;
    let b = slice(offsets, classes, "offsets")?;
    Ok(LinearClassifier::new(Tensor::new(vec![classes, dim], w.to_vec())?, vector(b)?)?)
}

fn copy_out(src: &[f64], dst: &mut [f64]) -> Out<()> {
    if src.len() != dst.len() {
        return Err(bad(format!("output holds {} values, result has {}", dst.len(), src.len())));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn uap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`) and returns the full message length
/// excluding the terminator.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn uap_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Projects `delta` onto the ℓ2 ball of radius `epsilon`. `out` may alias
/// `delta`.
///
/// # Safety
/// `delta` and `out` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn uap_project_l2(delta: *const f64, len: usize, epsilon: f64, out: *mut f64) -> i32 {
    guard(|| {
        let t = vector(slice(delta, len, "delta")?)?;
        let p = project_l2(&t, epsilon)?;
        copy_out(p.data(), slice_mut(out, len, "out")?)
    })
}

/// Clamps `delta` to `[-epsilon, epsilon]`. `out` may alias `delta`.
///
/// # Safety
/// `delta` and `out` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn uap_project_linf(delta: *const f64, len: usize, epsilon: f64, out: *mut f64) -> i32 {
    guard(|| {
        let t = vector(slice(delta, len, "delta")?)?;
        let p = project_linf(&t, epsilon)?;
        copy_out(p.data(), slice_mut(out, len, "out")?)
    })
}

/// Distance from `x` to the hyperplane `w·x + b = 0`.
///
/// # Safety
/// `w` and `x` must be valid for `dim` doubles; `distance` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uap_binary_distance(
    w: *const f64,
    b: f64,
    x: *const f64,
    dim: usize,
    distance: *mut f64,
) -> i32 {
    guard(|| {
        let d = binary_distance(&vector(slice(w, dim, "w")?)?, b, &vector(slice(x, dim, "x")?)?)?;
        write(distance, d, "distance")
    })
}

/// Smallest step `r` putting `x + r` on the hyperplane `w·x + b = 0`.
///
/// # Safety
/// `w`, `x` and `out` must be valid for `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn uap_binary_min_perturbation(
    w: *const f64,
    b: f64,
    x: *const f64,
    dim: usize,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let r = binary_min_perturbation(&vector(slice(w, dim, "w")?)?, b, &vector(slice(x, dim, "x")?)?)?;
        copy_out(r.data(), slice_mut(out, dim, "out")?)
    })
}

/// Index of the class whose boundary with `y` is closest to `x`, for the
/// affine classifier with row-major `weights` (`classes × dim`) and `offsets`.
///
/// # Safety
/// Pointers must be valid for the sizes implied by `classes` and `dim`.
#[no_mangle]
pub unsafe extern "C" fn uap_nearest_boundary(
    weights: *const f64,
    offsets: *const f64,
    classes: usize,
    dim: usize,
    x: *const f64,
    y: usize,
    nearest: *mut usize,
) -> i32 {
    guard(|| {
        let clf = classifier(weights, offsets, classes, dim)?;
        let l = nearest_boundary(&clf, &vector(slice(x, dim, "x")?)?, y)?;
        write(nearest, l, "nearest")
    })
}

/// Smallest step onto the nearest boundary of class `y`.
///
/// # Safety
/// Pointers must be valid for the sizes implied by `classes` and `dim`.
#[no_mangle]
pub unsafe extern "C" fn uap_multiclass_min_perturbation(
    weights: *const f64,
    offsets: *const f64,
    classes: usize,
    dim: usize,
    x: *const f64,
    y: usize,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let clf = classifier(weights, offsets, classes, dim)?;
        let r = multiclass_min_perturbation(&clf, &vector(slice(x, dim, "x")?)?, y)?;
        copy_out(r.data(), slice_mut(out, dim, "out")?)
    })
}

/// Step that pushes `x` past its `k` nearest boundaries, overshoot included.
/// `converged` is set to 1 when all `k` were crossed, else 0; `iterations`
/// may be null.
///
/// # Safety
/// Pointers must be valid for the sizes implied by `classes` and `dim`.
#[no_mangle]
pub unsafe extern "C" fn uap_cross_k_boundaries(
    weights: *const f64,
    offsets: *const f64,
    classes: usize,
    dim: usize,
    x: *const f64,
    y: usize,
    k: usize,
    eta: f64,
    max_iters: usize,
    out: *mut f64,
    converged: *mut i32,
    iterations: *mut usize,
) -> i32 {
    guard(|| {
        let clf = classifier(weights, offsets, classes, dim)?;
        let report = cross_k_boundaries(&clf, &vector(slice(x, dim, "x")?)?, y, k, eta, max_iters)?;
        copy_out(report.perturbation.data(), slice_mut(out, dim, "out")?)?;
        write(converged, i32::from(report.converged), "converged")?;
        if !iterations.is_null() {
            iterations.write(report.iterations);
        }
        Ok(())
    })
}

/// Sets `hit` to 1 if any index in `matches` ranks in the top `k` of the
/// row-major `gallery` (`n_gallery × dim`) by dot product with `query`.
///
/// # Safety
/// Pointers must be valid for the sizes given.
#[no_mangle]
pub unsafe extern "C" fn uap_indicator(
    query: *const f64,
    gallery: *const f64,
    n_gallery: usize,
    dim: usize,
    matches: *const usize,
    n_matches: usize,
    k: usize,
    hit: *mut i32,
) -> i32 {
    guard(|| {
        let index = EmbeddingIndex::new(Tensor::new(vec![n_gallery, dim], slice(gallery, n_gallery * dim, "gallery")?.to_vec())?)?;
        let h = indicator(slice(query, dim, "query")?, &index, slice(matches, n_matches, "matches")?, k)?;
        write(hit, i32::from(h), "hit")
    })
}

/// Creates a randomly initialized encoder. `kind` is `UAP_ENCODER_LINEAR` or
/// `UAP_ENCODER_MLP` (the benchmark architecture with the given input and
/// output sizes).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uap_encoder_new(
    kind: i32,
    channels: usize,
    height: usize,
    width: usize,
    embed_dim: usize,
    seed: u64,
    out: *mut *mut UapEncoder,
) -> i32 {
    guard(|| {
        let shape = [channels, height, width];
        let config = match kind {
            UAP_ENCODER_LINEAR => EncoderConfig::linear(shape, embed_dim, seed),
            UAP_ENCODER_MLP => EncoderConfig { input_shape: shape, embed_dim, seed, ..EncoderConfig::toy_mlp() },
            other => return Err(bad(format!("unknown encoder kind {other}"))),
        };
        let enc = Encoder::random(config)?;
        write(out, Box::into_raw(Box::new(UapEncoder(enc))), "out")
    })
}

/// Loads an encoder manifest (or its directory), verifying its hashes.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uap_encoder_load(path_: *const c_char, out: *mut *mut UapEncoder) -> i32 {
    guard(|| {
        let enc = Encoder::load(&path(path_)?)?;
        write(out, Box::into_raw(Box::new(UapEncoder(enc))), "out")
    })
}

/// Writes the encoder into directory `dir`.
///
/// # Safety
/// `encoder` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn uap_encoder_save(encoder: *const UapEncoder, dir: *const c_char) -> i32 {
    guard(|| {
        reference(encoder, "encoder")?.0.save(&path(dir)?)?;
        Ok(())
    })
}

/// Input length (`c·h·w`) and embedding dimension.
///
/// # Safety
/// `encoder` must come from this library; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn uap_encoder_dims(
    encoder: *const UapEncoder,
    input_len: *mut usize,
    embed_dim: *mut usize,
) -> i32 {
    guard(|| {
        let enc = &reference(encoder, "encoder")?.0;
        write(input_len, enc.config().input_len(), "input_len")?;
        write(embed_dim, enc.embed_dim(), "embed_dim")
    })
}

/// Unit-norm embedding of a `c×h×w` image given as `input_len` doubles.
///
/// # Safety
/// `pixels` must be valid for `input_len` doubles and `out` for `embed_dim`.
#[no_mangle]
pub unsafe extern "C" fn uap_encoder_encode(
    encoder: *const UapEncoder,
    pixels: *const f64,
    input_len: usize,
    out: *mut f64,
    embed_dim: usize,
) -> i32 {
    guard(|| {
        let enc = &reference(encoder, "encoder")?.0;
        let image = Tensor::new(enc.input_shape().to_vec(), slice(pixels, input_len, "pixels")?.to_vec())?;
        let e = enc.encode(&image)?;
        copy_out(e.data(), slice_mut(out, embed_dim, "out")?)
    })
}

/// # Safety
/// `encoder` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn uap_encoder_free(encoder: *mut UapEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// Loads a dataset manifest (or its directory), verifying hashes and
/// structure.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uap_dataset_load(path_: *const c_char, out: *mut *mut UapDataset) -> i32 {
    guard(|| {
        let ds = Dataset::load(&path(path_)?)?;
        write(out, Box::into_raw(Box::new(UapDataset(ds))), "out")
    })
}

/// # Safety
/// `dataset` must come from this library; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn uap_dataset_counts(
    dataset: *const UapDataset,
    n_images: *mut usize,
    n_texts: *mut usize,
) -> i32 {
    guard(|| {
        let ds = &reference(dataset, "dataset")?.0;
        write(n_images, ds.n_images(), "n_images")?;
        write(n_texts, ds.n_texts(), "n_texts")
    })
}

/// # Safety
/// `dataset` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn uap_dataset_free(dataset: *mut UapDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Defaults for `mode`, sized for images of `height × width`: TIRA for patch
/// mode (3% square), TRA with the ℓ2 budget for global mode.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uap_attack_config_default(
    mode: i32,
    height: usize,
    width: usize,
    out: *mut UapAttackConfig,
) -> i32 {
    guard(|| {
        let (strategy, mask_side, constraint) = match mode {
            UAP_MODE_PATCH => {
                (UAP_STRATEGY_TIRA, Mask::side_for_area(height, width, DEFAULT_PATCH_FRACTION), Constraint::default_patch([1, height, width])?)
            }
            UAP_MODE_GLOBAL => (UAP_STRATEGY_TRA, 0, Constraint::default_global(Norm::L2)),
            other => return Err(bad(format!("unknown mode {other}"))),
        };
        let epsilon = match constraint {
            Constraint::Global { epsilon, .. } => epsilon,
            Constraint::Patch { .. } => 0.0,
        };
        let d = AttackConfig::new(constraint);
        write(
            out,
            UapAttackConfig {
                strategy,
                mode,
                norm: UAP_NORM_L2,
                epsilon,
                mask_side,
                k: d.k,
                eta: d.eta,
                epochs: d.epochs,
                max_inner_iters: d.max_inner_iters,
                batch_size: d.batch_size,
                probe_images: d.probe_images,
                seed: d.seed,
                shuffle: i32::from(d.shuffle),
            },
            "out",
        )
    })
}

fn attack_config(c: &UapAttackConfig, image_shape: [usize; 3]) -> Out<(AttackConfig, Strategy)> {
    let strategy = match c.strategy {
        UAP_STRATEGY_TRA => Strategy::Tra,
        UAP_STRATEGY_IRA => Strategy::Ira,
        UAP_STRATEGY_TIRA => Strategy::Tira,
        other => return Err(bad(format!("unknown strategy {other}"))),
    };
    let constraint = match c.mode {
        UAP_MODE_PATCH => Constraint::Patch { mask: Mask::bottom_right_square(&image_shape, c.mask_side, (0, 0))? },
        UAP_MODE_GLOBAL => {
            let norm = match c.norm {
                UAP_NORM_L2 => Norm::L2,
                UAP_NORM_LINF => Norm::Linf,
                other => return Err(bad(format!("unknown norm {other}"))),
            };
            Constraint::Global { norm, epsilon: c.epsilon }
        }
        other => return Err(bad(format!("unknown mode {other}"))),
    };
    let cfg = AttackConfig {
        k: c.k,
        eta: c.eta,
        epochs: c.epochs,
        max_inner_iters: c.max_inner_iters,
        batch_size: c.batch_size,
        constraint,
        seed: c.seed,
        shuffle: c.shuffle != 0,
        probe_images: c.probe_images,
    };
    Ok((cfg, strategy))
}

/// Synthesizes a universal perturbation.
///
/// # Safety
/// Handles must come from this library; `config` must be readable and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn uap_attack_run(
    encoder: *const UapEncoder,
    dataset: *const UapDataset,
    config: *const UapAttackConfig,
    out: *mut *mut UapPerturbation,
) -> i32 {
    guard(|| {
        let enc = &reference(encoder, "encoder")?.0;
        let ds = &reference(dataset, "dataset")?.0;
        let (cfg, strategy) = attack_config(reference(config, "config")?, ds.params.image_shape)?;
        let (p, _) = run_attack(enc, ds, &cfg, strategy)?;
        write(out, Box::into_raw(Box::new(UapPerturbation(p))), "out")
    })
}

/// Loads a saved perturbation (sidecar path or directory), verifying hashes
/// and budget.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uap_perturbation_load(path_: *const c_char, out: *mut *mut UapPerturbation) -> i32 {
    guard(|| {
        let p = Perturbation::load(&path(path_)?)?;
        write(out, Box::into_raw(Box::new(UapPerturbation(p))), "out")
    })
}

/// Writes the perturbation files into directory `dir`.
///
/// # Safety
/// `perturbation` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn uap_perturbation_save(perturbation: *const UapPerturbation, dir: *const c_char) -> i32 {
    guard(|| {
        reference(perturbation, "perturbation")?.0.save(&path(dir)?)?;
        Ok(())
    })
}

/// Copies `δ` (row-major `c×h×w`) into `out`, which must hold exactly `len`
/// values.
///
/// # Safety
/// `perturbation` must come from this library; `out` must be valid for `len`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn uap_perturbation_delta(perturbation: *const UapPerturbation, out: *mut f64, len: usize) -> i32 {
    guard(|| copy_out(reference(perturbation, "perturbation")?.0.delta.data(), slice_mut(out, len, "out")?))
}

/// # Safety
/// `perturbation` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn uap_perturbation_free(perturbation: *mut UapPerturbation) {
    if !perturbation.is_null() {
        drop(Box::from_raw(perturbation));
    }
}

/// Clean and adversarial TR/IR recall at `k` (clamped to the gallery size).
///
/// # Safety
/// Handles must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uap_evaluate_recall(
    encoder: *const UapEncoder,
    dataset: *const UapDataset,
    perturbation: *const UapPerturbation,
    k: usize,
    out: *mut UapRecall,
) -> i32 {
    guard(|| {
        let enc = &reference(encoder, "encoder")?.0;
        let ds = &reference(dataset, "dataset")?.0;
        let p = &reference(perturbation, "perturbation")?.0;
        let metrics = evaluate(enc, ds, p, &[k], &[])?;
        let pick = |name: &str| {
            metrics.iter().find(|m| m.metric == name).map(|m| (m.clean, m.adversarial)).expect("metric computed")
        };
        let (tr_clean, tr_adversarial) = pick(TR_RECALL);
        let (ir_clean, ir_adversarial) = pick(IR_RECALL);
        write(out, UapRecall { tr_clean, tr_adversarial, ir_clean, ir_adversarial }, "out")
    })
}
