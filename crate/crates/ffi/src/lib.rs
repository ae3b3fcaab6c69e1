//! C interface to koalanet.
//!
//! Images cross the boundary as tightly packed 8-bit RGB, row-major.
//! Kernels are 20×20 row-major `double` arrays. Every function returns a
//! [`KoalaStatus`]; on failure [`koala_last_error`] describes the problem
//! for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use image::RgbImage;
use koalanet::degrade::{self, DegradationSpec, Kernel2D, KernelProvenance, KERNEL_TAPS};
use koalanet::infer::Model;
use koalanet::tensor::PadMode;
use koalanet::{eval, io, Error};

/// Taps in a degradation kernel.
pub const KOALA_KERNEL_TAPS: usize = 400;
const _: () = assert!(KOALA_KERNEL_TAPS == KERNEL_TAPS);

/// Result codes. Values 2 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KoalaStatus {
    Ok = 0,
    Io = 2,
    Invalid = 3,
    Numeric = 4,
    NullPointer = 5,
    Panic = 6,
}

/// Loaded network. Create with [`koala_model_load`], release with
/// [`koala_model_free`].
pub struct KoalaModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Lib(Error::InvalidArgument(msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KoalaStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KoalaStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("{what} is null"));
            KoalaStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            match e.exit_code() {
                2 => KoalaStatus::Io,
                4 => KoalaStatus::Numeric,
                _ => KoalaStatus::Invalid,
            }
        }
        Err(_) => {
            set_error("internal panic");
            KoalaStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn read_image(rgb: *const u8, width: u32, height: u32) -> Result<RgbImage, Failure> {
    if width == 0 || height == 0 {
        return Err(invalid("image dimensions must be positive"));
    }
    let len = width as usize * height as usize * 3;
    let data = slice(rgb, len, "rgb")?;
    Ok(RgbImage::from_raw(width, height, data.to_vec()).expect("buffer length"))
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got == want {
        Ok(())
    } else {
        Err(invalid(format!("{what} holds {got} bytes, expected {want}")))
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn koala_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or an empty string.
/// Valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn koala_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint written by `koalanet train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn koala_model_load(path: *const c_char, out: *mut *mut KoalaModel) -> KoalaStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let inner = Model::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(KoalaModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`koala_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn koala_model_free(model: *mut KoalaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Upscaling factor, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn koala_model_scale(model: *const KoalaModel) -> u32 {
    model.as_ref().map_or(0, |m| m.inner.scale() as u32)
}

/// Whether the model carries KOALA modules and a downsampler.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn koala_model_is_koala(model: *const KoalaModel) -> bool {
    model.as_ref().is_some_and(|m| m.inner.is_koala())
}

/// Super-resolves a `width × height` image into `out`, which must hold
/// `width·s × height·s × 3` bytes.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn koala_model_super_resolve(
    model: *const KoalaModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    out: *mut u8,
    out_len: usize,
) -> KoalaStatus {
    guard(|| {
        let model = model.as_ref().ok_or(Failure::Null("model"))?;
        let img = read_image(rgb, width, height)?;
        let s = model.inner.scale();
        check_len(out_len, width as usize * s * height as usize * s * 3, "out")?;
        let result = model.inner.run(&img, false)?;
        slice_mut(out, out_len, "out")?.copy_from_slice(result.sr.as_raw());
        Ok(())
    })
}

/// Image-wide mean of the estimated per-pixel degradation kernels, written
/// to `kernel_out` (400 doubles).
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn koala_model_estimate_kernel(
    model: *const KoalaModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    kernel_out: *mut f64,
) -> KoalaStatus {
    guard(|| {
        let model = model.as_ref().ok_or(Failure::Null("model"))?;
        let img = read_image(rgb, width, height)?;
        let out = slice_mut(kernel_out, KERNEL_TAPS, "kernel_out")?;
        let result = model.inner.run(&img, true)?;
        let fd = result.kernels.expect("kernels requested");
        out.copy_from_slice(eval::mean_kernel(&fd, 0)?.values());
        Ok(())
    })
}

/// Degradation kernel for an anisotropic Gaussian followed by bicubic
/// downscaling, written to `kernel_out` (400 doubles).
///
/// # Safety
/// `kernel_out` must hold 400 doubles.
#[no_mangle]
pub unsafe extern "C" fn koala_degradation_kernel(
    sigma1: f64,
    sigma2: f64,
    theta: f64,
    scale: u32,
    kernel_out: *mut f64,
) -> KoalaStatus {
    guard(|| {
        let out = slice_mut(kernel_out, KERNEL_TAPS, "kernel_out")?;
        let spec = DegradationSpec::new(sigma1, sigma2, theta, 0)?;
        out.copy_from_slice(degrade::degradation_kernel(&spec, scale as usize)?.values());
        Ok(())
    })
}

/// Blurs with `kernel` (400 doubles), subsamples by `scale` and quantizes
/// to 8 bits. `width` and `height` must be multiples of `scale`; `out`
/// holds `width/s × height/s × 3` bytes.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn koala_degrade(
    rgb: *const u8,
    width: u32,
    height: u32,
    kernel: *const f64,
    scale: u32,
    out: *mut u8,
    out_len: usize,
) -> KoalaStatus {
    guard(|| {
        let img = read_image(rgb, width, height)?;
        let taps = slice(kernel, KERNEL_TAPS, "kernel")?;
        if taps.iter().any(|v| !v.is_finite()) {
            return Err(invalid("kernel has non-finite taps"));
        }
        let s = scale as usize;
        degrade::check_scale(s)?;
        if width as usize % s != 0 || height as usize % s != 0 {
            return Err(invalid(format!("{width}×{height} is not divisible by {s}")));
        }
        check_len(out_len, (width as usize / s) * (height as usize / s) * 3, "out")?;
        let kd = Kernel2D::new(taps.to_vec(), KernelProvenance::External)?;
        let lr = degrade::degrade_image(&io::rgb_to_tensor_255::<f64>(&img), &kd, s, PadMode::Replicate)?;
        slice_mut(out, out_len, "out")?.copy_from_slice(io::tensor_255_to_rgb(&lr, 0).as_raw());
        Ok(())
    })
}
