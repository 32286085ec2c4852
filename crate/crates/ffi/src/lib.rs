//! C ABI for periface.
//!
//! Every fallible call returns an `i32` status (`PF_OK` on success) and
//! writes its result through an out-pointer. On failure the message is kept
//! per thread and can be read with [`pf_last_error_message`]. Handles are
//! opaque, created by `pf_*_new`/`pf_*_load`-style calls and released with
//! the matching `pf_*_free`. Pointers passed in must be NULL or valid for
//! the stated length; a handle must not be used after it is freed.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use periface::archive::TensorArchive;
use periface::generator::{generate, load_generator, GeneratorBackend, ToyGenerator};
use periface::imaging::Image;
use periface::inversion::InversionConfig;
use periface::latent::StyleW;
use periface::losses::{loss_opt_value, loss_total, LossComponents, LossWeights};
use periface::metrics::{curves_from_scores, metric_l1, metric_psnr, metric_ssim, metric_tv, threshold_grid};
use periface::pipeline::{models_from_checkpoint, run_inpaint, InpaintContext, InpaintOutput, Models, RunConfig};
use periface::Error;

pub const PF_OK: i32 = 0;
pub const PF_ERR_NULL_POINTER: i32 = 1;
pub const PF_ERR_INVALID_ARGUMENT: i32 = 2;
pub const PF_ERR_DIMENSION: i32 = 3;
pub const PF_ERR_IO: i32 = 4;
pub const PF_ERR_NUMERIC: i32 = 5;
pub const PF_ERR_CONFIG: i32 = 6;
/// Malformed weight archive, image, CSV or JSON.
pub const PF_ERR_FORMAT: i32 = 7;
/// Landmarks, masks, embeddings or datasets that cannot be used.
pub const PF_ERR_DEGENERATE: i32 = 8;
pub const PF_ERR_BUFFER_TOO_SMALL: i32 = 9;
pub const PF_ERR_PANIC: i32 = 99;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn code_for(e: &Error) -> i32 {
    match e {
        Error::Dimension(_) | Error::Scale(_) => PF_ERR_DIMENSION,
        Error::InvalidLoss { .. } | Error::Divergence { .. } | Error::Conditioning(_) => PF_ERR_NUMERIC,
        Error::Config(_) => PF_ERR_CONFIG,
        Error::Io { .. } => PF_ERR_IO,
        Error::Archive(_) | Error::Codec { .. } | Error::Json(_) | Error::Csv(_) => PF_ERR_FORMAT,
        Error::InvalidLandmarks(_)
        | Error::DegenerateMask(_)
        | Error::DegenerateEmbedding(_)
        | Error::LandmarkBackend(_)
        | Error::EmptyBatch
        | Error::EmptyDataset(_)
        | Error::InsufficientPairs { .. } => PF_ERR_DEGENERATE,
        Error::InvalidValue(_) => PF_ERR_INVALID_ARGUMENT,
    }
}

/// Failure inside the wrapper itself, before or after calling the library.
struct Fail(i32, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(code_for(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PF_ERR_NULL_POINTER, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PF_OK,
        Ok(Err(Fail(code, msg))) => {
            set_last_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            PF_ERR_PANIC
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PF_ERR_INVALID_ARGUMENT, format!("`{what}` is not UTF-8")))
}

unsafe fn path(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    string(p, what).map(PathBuf::from)
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize) -> Result<(), Fail> {
    if len < src.len() {
        return Err(Fail(
            PF_ERR_BUFFER_TOO_SMALL,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(null("buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn pf_clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// An RGB image, channel-planar, values in `[0, 1]`.
pub struct PfImage(Image);

/// `data` holds `3 * height * width` values, red plane first.
/// `data` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_image_new(
    height: usize,
    width: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut PfImage,
) -> i32 {
    guard(|| {
        let v = slice(data, len, "data")?.to_vec();
        put(out, PfImage(Image::new(height, width, v)?), "out")
    })
}

/// `file` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_image_load_png(file: *const c_char, out: *mut *mut PfImage) -> i32 {
    guard(|| {
        let p = path(file, "path")?;
        put(out, PfImage(Image::load_png(&p)?), "out")
    })
}

/// `image` must be a live handle; `file` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pf_image_save_png(image: *const PfImage, file: *const c_char) -> i32 {
    guard(|| {
        let img = as_ref(image, "image")?;
        Ok(img.0.save_png(&path(file, "path")?)?)
    })
}

/// `image` must be a live handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn pf_image_height(image: *const PfImage) -> usize {
    image.as_ref().map_or(0, |i| i.0.height())
}

/// `image` must be a live handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn pf_image_width(image: *const PfImage) -> usize {
    image.as_ref().map_or(0, |i| i.0.width())
}

/// Copy the pixel data into `buf`, which must hold `3 * height * width`
/// doubles.
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_image_copy_data(image: *const PfImage, buf: *mut f64, len: usize) -> i32 {
    guard(|| copy_out(as_ref(image, "image")?.0.data(), buf, len))
}

/// `image` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pf_image_free(image: *mut PfImage) {
    free(image)
}

/// A frozen generator.
pub struct PfGenerator(Box<dyn GeneratorBackend>);

/// The built-in toy generator.
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_generator_toy(out: *mut *mut PfGenerator) -> i32 {
    guard(|| put(out, PfGenerator(Box::new(ToyGenerator::toy())), "out"))
}

/// `spec` is `toy` or `archive:<path>`.
/// `spec` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_generator_load(spec: *const c_char, out: *mut *mut PfGenerator) -> i32 {
    guard(|| {
        let gen = load_generator(string(spec, "spec")?)?;
        put(out, PfGenerator(Box::new(gen)), "out")
    })
}

/// `gen` must be a live handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn pf_generator_latent_dim(gen: *const PfGenerator) -> usize {
    gen.as_ref().map_or(0, |g| g.0.latent_dim())
}

/// Render `G(w)`.
/// `w` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_generator_render(
    gen: *const PfGenerator,
    w: *const f64,
    len: usize,
    out: *mut *mut PfImage,
) -> i32 {
    guard(|| {
        let g = as_ref(gen, "generator")?;
        let w = StyleW::new(slice(w, len, "w")?.to_vec())?;
        put(out, PfImage(generate(&w, g.0.as_ref())?), "out")
    })
}

/// `gen` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pf_generator_free(gen: *mut PfGenerator) {
    free(gen)
}

/// Trained encoders, mapper and frozen generator plus the loss weights used
/// for latent refinement.
pub struct PfInpainter(InpaintContext);

/// Untrained toy models.
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_inpainter_toy(out: *mut *mut PfInpainter) -> i32 {
    guard(|| {
        let cfg = RunConfig::default();
        let models = Models::from_config(&cfg)?;
        put(out, PfInpainter(InpaintContext::new(models, cfg.weights)), "out")
    })
}

/// Models restored from a training checkpoint.
/// `checkpoint` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_inpainter_load(checkpoint: *const c_char, out: *mut *mut PfInpainter) -> i32 {
    guard(|| {
        let p = path(checkpoint, "checkpoint")?;
        let (cfg, models) = models_from_checkpoint(&TensorArchive::load(&p)?)?;
        put(out, PfInpainter(InpaintContext::new(models, cfg.weights)), "out")
    })
}

/// `inpainter` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pf_inpainter_free(inpainter: *mut PfInpainter) {
    free(inpainter)
}

/// Settings of the latent refinement. `max_iters = 0` skips it.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfInversionParams {
    pub max_iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tolerance: f64,
}

#[no_mangle]
pub extern "C" fn pf_inversion_params_default() -> PfInversionParams {
    let d = InversionConfig::default();
    PfInversionParams {
        max_iters: d.max_iters,
        lr: d.lr,
        beta1: d.beta1,
        beta2: d.beta2,
        tolerance: d.tolerance,
    }
}

/// Outputs of one inpainting run.
pub struct PfInpaintResult(InpaintOutput);

/// Mask the periocular region of `input`, encode, map, render and refine.
/// Handles must be live; `params` may be NULL for defaults; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pf_inpaint(
    inpainter: *const PfInpainter,
    input: *const PfImage,
    params: *const PfInversionParams,
    out: *mut *mut PfInpaintResult,
) -> i32 {
    guard(|| {
        let ctx = as_ref(inpainter, "inpainter")?;
        let img = as_ref(input, "input")?;
        let p = params
            .as_ref()
            .copied()
            .unwrap_or_else(|| pf_inversion_params_default());
        let cfg = InversionConfig {
            max_iters: p.max_iters,
            lr: p.lr,
            beta1: p.beta1,
            beta2: p.beta2,
            tolerance: p.tolerance,
            ..Default::default()
        };
        put(out, PfInpaintResult(run_inpaint(&img.0, &ctx.0, &cfg)?), "out")
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfResultImage {
    /// The masked input.
    Masked = 0,
    /// The periocular crop.
    Crop = 1,
    /// Rendered from the encoded latent, before refinement.
    Pre = 2,
    /// Rendered from the refined latent.
    Post = 3,
}

/// A new image handle holding a copy of the requested output.
/// `result` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_result_image(
    result: *const PfInpaintResult,
    which: PfResultImage,
    out: *mut *mut PfImage,
) -> i32 {
    guard(|| {
        let r = &as_ref(result, "result")?.0;
        let img = match which {
            PfResultImage::Masked => &r.in_masked,
            PfResultImage::Crop => &r.crop,
            PfResultImage::Pre => &r.pre,
            PfResultImage::Post => &r.post,
        };
        put(out, PfImage(img.clone()), "out")
    })
}

/// Number of recorded objective values (initial value included).
/// `result` must be a live handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn pf_result_trace_len(result: *const PfInpaintResult) -> usize {
    result.as_ref().map_or(0, |r| r.0.result.loss_trace.len())
}

/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_result_copy_trace(result: *const PfInpaintResult, buf: *mut f64, len: usize) -> i32 {
    guard(|| copy_out(&as_ref(result, "result")?.0.result.loss_trace, buf, len))
}

/// Copy the refined latent `w*` (the generator's latent dimension).
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_result_copy_w(result: *const PfInpaintResult, buf: *mut f64, len: usize) -> i32 {
    guard(|| copy_out(as_ref(result, "result")?.0.result.w_star.values(), buf, len))
}

/// Lowest objective value reached; NaN for a NULL handle.
/// `result` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn pf_result_best_loss(result: *const PfInpaintResult) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.0.result.best_loss())
}

/// `result` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pf_result_free(result: *mut PfInpaintResult) {
    free(result)
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfMetric {
    /// Mean per-pixel ℓ1 of the RGB difference, 0–255 scale.
    L1 = 0,
    Psnr = 1,
    Ssim = 2,
    /// Total variation of the second image; the first is ignored.
    Tv = 3,
}

/// Handles must be live (`gt` may be NULL for `Tv`); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_metric(metric: PfMetric, gt: *const PfImage, output: *const PfImage, out: *mut f64) -> i32 {
    guard(|| {
        let o = &as_ref(output, "output")?.0;
        let v = match metric {
            PfMetric::Tv => metric_tv(o)?,
            m => {
                let g = &as_ref(gt, "gt")?.0;
                match m {
                    PfMetric::L1 => metric_l1(g, o)?,
                    PfMetric::Psnr => metric_psnr(g, o)?,
                    _ => metric_ssim(g, o)?,
                }
            }
        };
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Loss components in the order of the weighted training total.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PfLossComponents {
    pub perc: f64,
    pub style: f64,
    pub id: f64,
    pub lnd: f64,
    pub rec: f64,
}

/// Weighted training total under the default weights.
/// `components` must be readable; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_loss_total(components: *const PfLossComponents, out: *mut f64) -> i32 {
    guard(|| {
        let c = as_ref(components, "components")?;
        let b = loss_total(
            &LossComponents {
                perc: c.perc,
                style: c.style,
                id: c.id,
                lnd: c.lnd,
                rec: c.rec,
                adv_g: 0.0,
            },
            &LossWeights::default(),
        )?;
        *out.as_mut().ok_or_else(|| null("out"))? = b.total;
        Ok(())
    })
}

/// Inversion objective from its perceptual and identity terms under the
/// default weights.
#[no_mangle]
pub extern "C" fn pf_loss_opt(perc: f64, id: f64) -> f64 {
    loss_opt_value(perc, id, &LossWeights::default())
}

/// Equal error rate of cosine similarity scores over `n_thresholds` evenly
/// spaced thresholds in `[-1, 1]`.
/// The score arrays must hold the stated number of doubles; `eer` and
/// `eer_threshold` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_equal_error_rate(
    genuine: *const f64,
    n_genuine: usize,
    impostor: *const f64,
    n_impostor: usize,
    n_thresholds: usize,
    eer: *mut f64,
    eer_threshold: *mut f64,
) -> i32 {
    guard(|| {
        if n_thresholds == 0 {
            return Err(Fail(PF_ERR_INVALID_ARGUMENT, "need at least one threshold".into()));
        }
        let c = curves_from_scores(
            slice(genuine, n_genuine, "genuine")?,
            slice(impostor, n_impostor, "impostor")?,
            &threshold_grid(n_thresholds),
        )?;
        *eer.as_mut().ok_or_else(|| null("eer"))? = c.eer;
        *eer_threshold.as_mut().ok_or_else(|| null("eer_threshold"))? = c.eer_threshold;
        Ok(())
    })
}
