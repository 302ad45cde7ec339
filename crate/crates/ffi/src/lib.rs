//! C interface to the colfield library.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free` function. Every fallible call returns
//! a [`CfStatus`]; on failure the message is available from
//! [`cf_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use colfield::raster::Image;
use colfield::recovery::psnr;
use colfield::scene::{Scene, ViewId};
use colfield::train::{render_view, TrainState};
use colfield::{checkpoint, templates, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    ShapeMismatch = 3,
    Io = 4,
    Corrupt = 5,
    Version = 6,
    Config = 7,
    Numerical = 8,
    Panic = 9,
}

/// A scene description.
pub struct CfScene(Scene);

/// A trained model with its optimizer state.
pub struct CfModel(TrainState);

/// An RGB image with channel values in [0, 1].
pub struct CfImage(Image);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CfStatus {
    match e {
        Error::Input(_) => CfStatus::InvalidInput,
        Error::Shape(_) => CfStatus::ShapeMismatch,
        Error::Io { .. } => CfStatus::Io,
        Error::Corrupt { .. } => CfStatus::Corrupt,
        Error::Version { .. } => CfStatus::Version,
        Error::Config(_) => CfStatus::Config,
        Error::Numerical(_) => CfStatus::Numerical,
    }
}

enum Fail {
    Null(&'static str),
    Utf8(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CfStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            CfStatus::NullPointer
        }
        Ok(Err(Fail::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            CfStatus::InvalidInput
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            CfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut *mut T) -> Result<&'a mut *mut T, Fail> {
    p.as_mut().ok_or(Fail::Null("output pointer"))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a template scene (`static-room`, `moving-box` or
/// `two-agent-intersection`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_scene_from_template(name: *const c_char, seed: u64, out: *mut *mut CfScene) -> CfStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let scene = templates::template(str_arg(name, "name")?, seed)?;
        *out = Box::into_raw(Box::new(CfScene(scene)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_scene_load(path: *const c_char, out: *mut *mut CfScene) -> CfStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let scene = Scene::load(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(CfScene(scene)));
        Ok(())
    })
}

/// # Safety
/// `scene` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cf_scene_save(scene: *const CfScene, path: *const c_char) -> CfStatus {
    guard(|| {
        let scene = handle(scene, "scene")?;
        scene.0.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Number of (agent, camera, timestamp) views; 0 for a null handle.
///
/// # Safety
/// `scene` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cf_scene_view_count(scene: *const CfScene) -> usize {
    scene.as_ref().map_or(0, |s| s.0.all_views().len())
}

/// # Safety
/// `scene` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cf_scene_free(scene: *mut CfScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_model_load(path: *const c_char, out: *mut *mut CfModel) -> CfStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let state = checkpoint::load(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(CfModel(state)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cf_model_save(model: *const CfModel, path: *const c_char) -> CfStatus {
    guard(|| {
        let model = handle(model, "model")?;
        checkpoint::save(&model.0, &PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Completed static and dynamic training steps.
///
/// # Safety
/// `model` must be a live handle; the step pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn cf_model_steps(model: *const CfModel, static_steps: *mut u64, dynamic_steps: *mut u64) -> CfStatus {
    guard(|| {
        let model = handle(model, "model")?;
        if let Some(s) = static_steps.as_mut() {
            *s = model.0.static_step;
        }
        if let Some(d) = dynamic_steps.as_mut() {
            *d = model.0.dynamic_step;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cf_model_free(model: *mut CfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Renders the view of `camera` on `agent` at timestamp `t` with `samples`
/// quadrature points per ray.
///
/// # Safety
/// Handles must be live, strings NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_render_view(
    model: *const CfModel,
    scene: *const CfScene,
    agent: *const c_char,
    camera: *const c_char,
    t: i64,
    samples: usize,
    out: *mut *mut CfImage,
) -> CfStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let model = handle(model, "model")?;
        let scene = handle(scene, "scene")?;
        let id = ViewId::new(str_arg(agent, "agent")?, str_arg(camera, "camera")?, t);
        let cam = scene.0.view_camera(&id)?;
        let state = &model.0;
        let img = render_view(&state.model, &cam, t, samples, state.render_mode(), state.config.chunk)?;
        *out = Box::into_raw(Box::new(CfImage(img)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_image_read_ppm(path: *const c_char, out: *mut *mut CfImage) -> CfStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let img = Image::read_ppm(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(CfImage(img)));
        Ok(())
    })
}

/// # Safety
/// `image` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cf_image_write_ppm(image: *const CfImage, path: *const c_char) -> CfStatus {
    guard(|| {
        let image = handle(image, "image")?;
        image.0.write_ppm(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Image size in pixels.
///
/// # Safety
/// `image` must be a live handle; `width` and `height` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cf_image_size(image: *const CfImage, width: *mut usize, height: *mut usize) -> CfStatus {
    guard(|| {
        let image = handle(image, "image")?;
        let (w, h) = (
            width.as_mut().ok_or(Fail::Null("width"))?,
            height.as_mut().ok_or(Fail::Null("height"))?,
        );
        *w = image.0.width;
        *h = image.0.height;
        Ok(())
    })
}

/// Copies the pixels as row-major RGB doubles into `buf`, which must hold
/// `3 * width * height` values.
///
/// # Safety
/// `image` must be a live handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cf_image_pixels(image: *const CfImage, buf: *mut f64, len: usize) -> CfStatus {
    guard(|| {
        let image = handle(image, "image")?;
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        let need = image.0.data.len() * 3;
        if len != need {
            return Err(Error::Shape(format!("buffer holds {len} values, image has {need}")).into());
        }
        let dst = std::slice::from_raw_parts_mut(buf, len);
        for (d, px) in dst.chunks_exact_mut(3).zip(&image.0.data) {
            d.copy_from_slice(px);
        }
        Ok(())
    })
}

/// # Safety
/// `image` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cf_image_free(image: *mut CfImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Peak signal-to-noise ratio in decibels; identical images give infinity.
///
/// # Safety
/// Both images must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_psnr(a: *const CfImage, b: *const CfImage, out: *mut f64) -> CfStatus {
    guard(|| {
        let (a, b) = (handle(a, "a")?, handle(b, "b")?);
        let out = out.as_mut().ok_or(Fail::Null("output pointer"))?;
        *out = psnr(&a.0, &b.0)?;
        Ok(())
    })
}
