//! C ABI over `ered-core`.
//!
//! Conventions:
//! - every function returns an [`EredStatus`]; results go through out-pointers
//! - on failure [`ered_last_error`] gives a message for the calling thread
//! - handles are opaque; free each with its `_free` function
//! - panics are caught at the boundary and reported as `ERED_STATUS_PANIC`
//!
//! Config strings are UTF-8 JSON in the same schema as the `ered` CLI.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ered_core::cli::ConfigFile;
use ered_core::forward::{ForwardModel, ForwardModelSpec};
use ered_core::imaging::{load_image, psnr, save_image, BitDepth};
use ered_core::optimizer::ered_run;
use ered_core::prior::GmmPrior;
use ered_core::{Error, Image, Shape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EredStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Io = 5,
    Numeric = 6,
    Protocol = 7,
    Divergence = 8,
    Panic = 9,
}

/// Image handle: `height × width × channels` doubles.
pub struct EredImage {
    inner: Image,
}

/// Gaussian-mixture prior handle.
pub struct EredPrior {
    inner: GmmPrior,
}

struct Failure(EredStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) => EredStatus::Shape,
            Error::InvalidArgument(_) | Error::OracleUnavailable(_) => EredStatus::InvalidArgument,
            Error::NonFinite { .. } | Error::Domain(_) => EredStatus::Numeric,
            Error::Io { .. } | Error::Codec(_) | Error::UnsupportedFormat(_) => EredStatus::Io,
            Error::Parse(_) | Error::Config(_) | Error::Json(_) => EredStatus::Config,
            Error::Protocol(_) | Error::Timeout(_) => EredStatus::Protocol,
            Error::Divergence { .. } => EredStatus::Divergence,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(EredStatus::Config, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EredStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            EredStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            EredStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(EredStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(EredStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut T, v: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

fn boxed_image(img: Image) -> *mut EredImage {
    Box::into_raw(Box::new(EredImage { inner: img }))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ered_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ered_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `height * width * channels` doubles, channel-interleaved row-major.
///
/// # Safety
/// `data` must point to that many readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ered_image_new(
    height: usize,
    width: usize,
    channels: usize,
    data: *const f64,
    out: *mut *mut EredImage,
) -> EredStatus {
    guard(|| {
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Failure(EredStatus::Shape, "image size overflows".into()))?;
        let data = slice_arg(data, n, "data")?.to_vec();
        let img = Image::from_shape(Shape::new(height, width, channels), data)?;
        put(out, boxed_image(img), "out")
    })
}

/// Loads PNG, PGM/PPM or EDNZ. PNG/PNM values are scaled to `[0, 1]`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ered_image_load(path: *const c_char, out: *mut *mut EredImage) -> EredStatus {
    guard(|| {
        let img = load_image(str_arg(path, "path")?)?;
        put(out, boxed_image(img), "out")
    })
}

/// Saves by extension. PNG output is 16-bit and clamped to `[0, 1]`.
///
/// # Safety
/// `image` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ered_image_save(image: *const EredImage, path: *const c_char) -> EredStatus {
    guard(|| {
        let img = ref_arg(image, "image")?;
        save_image(&img.inner, str_arg(path, "path")?, BitDepth::Sixteen)?;
        Ok(())
    })
}

/// # Safety
/// `image` must be a live handle; the out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn ered_image_shape(
    image: *const EredImage,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> EredStatus {
    guard(|| {
        let s = ref_arg(image, "image")?.inner.shape();
        put(height, s.height, "height")?;
        put(width, s.width, "width")?;
        put(channels, s.channels, "channels")
    })
}

/// Copies the pixels into `buf`, which must hold exactly `len` doubles.
///
/// # Safety
/// `image` must be a live handle; `buf` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ered_image_read(image: *const EredImage, buf: *mut f64, len: usize) -> EredStatus {
    guard(|| {
        let img = &ref_arg(image, "image")?.inner;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len != img.len() {
            return Err(Failure(
                EredStatus::Shape,
                format!("buffer holds {len} values, image has {}", img.len()),
            ));
        }
        ptr::copy_nonoverlapping(img.data().as_ptr(), buf, len);
        Ok(())
    })
}

/// # Safety
/// `image` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ered_image_free(image: *mut EredImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Parses `{"components": [{"weight", "mean", "tau"}, ...]}`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ered_prior_from_json(json: *const c_char, out: *mut *mut EredPrior) -> EredStatus {
    guard(|| {
        let prior: GmmPrior = serde_json::from_str(str_arg(json, "json")?)?;
        put(out, Box::into_raw(Box::new(EredPrior { inner: prior })), "out")
    })
}

/// # Safety
/// `prior` must be a live handle; `dim` writable.
#[no_mangle]
pub unsafe extern "C" fn ered_prior_dim(prior: *const EredPrior, dim: *mut usize) -> EredStatus {
    guard(|| put(dim, ref_arg(prior, "prior")?.inner.dim(), "dim"))
}

unsafe fn prior_input<'a>(prior: *const EredPrior, x: *const f64, len: usize) -> Result<(&'a GmmPrior, &'a [f64]), Failure> {
    let p = &ref_arg(prior, "prior")?.inner;
    if len != p.dim() {
        return Err(Failure(EredStatus::Shape, format!("x has {len} values, prior dimension is {}", p.dim())));
    }
    Ok((p, slice_arg(x, len, "x")?))
}

unsafe fn write_vec(out: *mut f64, v: &[f64]) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    ptr::copy_nonoverlapping(v.as_ptr(), out, v.len());
    Ok(())
}

/// `log p_σ(x)` for the prior smoothed by `N(0, σ² I)`.
///
/// # Safety
/// `x` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ered_prior_log_density(
    prior: *const EredPrior,
    sigma: f64,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> EredStatus {
    guard(|| {
        let (p, x) = prior_input(prior, x, len)?;
        put(out, p.log_density(sigma, x)?, "out")
    })
}

/// `∇ log p_σ(x)` into `out` (`len` doubles).
///
/// # Safety
/// `x` and `out` must each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ered_prior_score(
    prior: *const EredPrior,
    sigma: f64,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> EredStatus {
    guard(|| {
        let (p, x) = prior_input(prior, x, len)?;
        write_vec(out, &p.score(sigma, x)?)
    })
}

/// Posterior mean `E[x | x + σ ε = x_in]` into `out`; `sigma` must be > 0.
///
/// # Safety
/// `x` and `out` must each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ered_prior_mmse(
    prior: *const EredPrior,
    sigma: f64,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> EredStatus {
    guard(|| {
        let (p, x) = prior_input(prior, x, len)?;
        write_vec(out, &p.mmse_denoise(sigma, x)?)
    })
}

/// # Safety
/// `prior` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ered_prior_free(prior: *mut EredPrior) {
    if !prior.is_null() {
        drop(Box::from_raw(prior));
    }
}

/// Simulates an observation of `image` under a forward-model JSON object
/// (the `"model"` section of a CLI config).
///
/// # Safety
/// `model_json` must be a NUL-terminated string, `image` a live handle and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ered_degrade(
    model_json: *const c_char,
    image: *const EredImage,
    seed: u64,
    out: *mut *mut EredImage,
) -> EredStatus {
    guard(|| {
        let spec: ForwardModelSpec = serde_json::from_str(str_arg(model_json, "model_json")?)?;
        let x = &ref_arg(image, "image")?.inner;
        let model = ForwardModel::new(&spec, x.shape())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        put(out, boxed_image(model.degrade(x, &mut rng)?), "out")
    })
}

/// Runs the restoration loop. `config_json` needs `"model"` and `"run"`
/// sections as in the CLI config. On `ERED_STATUS_DIVERGENCE` the partial
/// iterate is still returned through `out`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string, `observation` a live
/// handle, `out` writable and `iterations` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ered_restore(
    config_json: *const c_char,
    observation: *const EredImage,
    out: *mut *mut EredImage,
    iterations: *mut usize,
) -> EredStatus {
    guard(|| {
        let cfg: ConfigFile = serde_json::from_str(str_arg(config_json, "config_json")?)?;
        let spec = cfg
            .model
            .ok_or_else(|| Failure(EredStatus::Config, "config has no \"model\" section".into()))?;
        let run = cfg
            .run
            .ok_or_else(|| Failure(EredStatus::Config, "config has no \"run\" section".into()))?;
        let y = &ref_arg(observation, "observation")?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let model = ForwardModel::new(&spec, spec.signal_shape(y.shape()))?;
        let (trace, failure) = match ered_run(&run, &model, y) {
            Ok(t) => (t, None),
            Err(Error::Divergence { iteration, reason, trace }) => (
                *trace,
                Some(Failure(EredStatus::Divergence, format!("diverged at iteration {iteration}: {reason}"))),
            ),
            Err(e) => return Err(e.into()),
        };
        if !iterations.is_null() {
            iterations.write(trace.meta.completed);
        }
        out.write(boxed_image(trace.final_image));
        failure.map_or(Ok(()), Err)
    })
}

/// PSNR in dB of `image` against `reference` for the given peak value.
///
/// # Safety
/// Both handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ered_psnr(
    image: *const EredImage,
    reference: *const EredImage,
    peak: f64,
    out: *mut f64,
) -> EredStatus {
    guard(|| {
        let v = psnr(&ref_arg(image, "image")?.inner, &ref_arg(reference, "reference")?.inner, peak)?;
        put(out, v, "out")
    })
}
