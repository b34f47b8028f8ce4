//! C ABI over the reconstruction library. Objects cross the boundary as
//! opaque handles released with their `_free` function; every fallible call
//! returns a [`VsStatus`] and leaves a message for [`vs_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use viewsplat::gaussian::GaussianCloud;
use viewsplat::image::PosedView;
use viewsplat::model::{FlexModel, ModelConfig};
use viewsplat::raster::rasterize;
use viewsplat::select::select_by_counts;
use viewsplat::workbench::checkpoint::load_train_state;
use viewsplat::workbench::dataset::read_scene;
use viewsplat::workbench::metrics::psnr;
use viewsplat::workbench::ply::export_ply;
use viewsplat::workbench::scene::{gen_scene, render_views, ColorScheme, PoseConfig, SceneKind, SceneSpec};
use viewsplat::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    OutOfDomain = 5,
    Format = 6,
    Config = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Reconstruction network.
pub struct VsModel(FlexModel);

/// Posed views of one scene in the dataset layout order.
pub struct VsViews(Vec<PosedView>);

/// Activated Gaussians.
pub struct VsCloud(GaussianCloud);

/// Values per Gaussian in [`vs_cloud_get`]: position, color, opacity,
/// scale, rotation.
pub const VS_GAUSSIAN_FLOATS: usize = 14;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> VsStatus {
    match e {
        Error::InvalidArgument(_) => VsStatus::InvalidArgument,
        Error::ShapeMismatch(_) => VsStatus::ShapeMismatch,
        Error::NonFinite(_) => VsStatus::NonFinite,
        Error::OutOfDomain(_) => VsStatus::OutOfDomain,
        Error::Format(_) | Error::Json(_) | Error::Image(_) => VsStatus::Format,
        Error::Config(_) => VsStatus::Config,
        Error::Io(_) => VsStatus::Io,
    }
}

enum Fail {
    Lib(Error),
    Status(VsStatus, &'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            VsStatus::Ok
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg.to_string());
            s
        }
        Err(_) => {
            set_error("internal panic".to_string());
            VsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Status(VsStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(VsStatus::InvalidArgument, "string argument is not UTF-8"))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Status(VsStatus::NullPointer, "null handle"))
}

unsafe fn out_ptr<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Status(VsStatus::NullPointer, "null output pointer"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Status(VsStatus::NullPointer, "null array"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Status(VsStatus::NullPointer, "null array"));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len` bytes. Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn vs_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Freshly initialized default model.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_model_new(seed: u64, out: *mut *mut VsModel) -> VsStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let m = FlexModel::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        *out = boxed(VsModel(m));
        Ok(())
    })
}

/// Model weights from a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_model_load(path: *const c_char, out: *mut *mut VsModel) -> VsStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path)?);
        let out = out_ptr(out)?;
        *out = boxed(VsModel(load_train_state(&path)?.0.model));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn vs_model_free(model: *mut VsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reads a scene directory in the dataset layout.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_views_load(dir: *const c_char, out: *mut *mut VsViews) -> VsStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir)?);
        let out = out_ptr(out)?;
        *out = boxed(VsViews(read_scene(&dir)?));
        Ok(())
    })
}

/// Generates a procedural scene and renders it at the default 64-view
/// layout. `kind` and `scheme` take the CLI names, e.g. "box", "two-tone".
///
/// # Safety
/// `kind` and `scheme` must be NUL-terminated strings; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vs_views_generate(
    kind: *const c_char,
    scheme: *const c_char,
    count: usize,
    seed: u64,
    out: *mut *mut VsViews,
) -> VsStatus {
    guard(|| {
        let spec = SceneSpec {
            kind: SceneKind::from_name(str_arg(kind)?)?,
            scheme: ColorScheme::from_name(str_arg(scheme)?)?,
            count,
            seed,
        };
        let out = out_ptr(out)?;
        let views = render_views(&gen_scene(&spec)?, &PoseConfig::default())?;
        *out = boxed(VsViews(views));
        Ok(())
    })
}

/// # Safety
/// `views` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn vs_views_count(views: *const VsViews) -> usize {
    views.as_ref().map_or(0, |v| v.0.len())
}

/// # Safety
/// `views` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn vs_views_free(views: *mut VsViews) {
    if !views.is_null() {
        drop(Box::from_raw(views));
    }
}

/// Reconstructs from the views at `indices`.
///
/// # Safety
/// Handles must be valid, `indices` valid for `n` entries, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vs_reconstruct(
    model: *const VsModel,
    views: *const VsViews,
    indices: *const usize,
    n: usize,
    out: *mut *mut VsCloud,
) -> VsStatus {
    guard(|| {
        let (m, v) = (handle(model)?, handle(views)?);
        let idx = slice(indices, n)?;
        if idx.iter().any(|&i| i >= v.0.len()) {
            return Err(Fail::Status(VsStatus::InvalidArgument, "view index out of range"));
        }
        let inputs: Vec<PosedView> = idx.iter().map(|&i| v.0[i].clone()).collect();
        let out = out_ptr(out)?;
        *out = boxed(VsCloud(m.0.reconstruct(&inputs)?));
        Ok(())
    })
}

/// # Safety
/// `cloud` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn vs_cloud_count(cloud: *const VsCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.count())
}

/// Writes the 14 activated values of Gaussian `i` to `out`.
///
/// # Safety
/// `cloud` must be valid and `out` valid for 14 doubles.
#[no_mangle]
pub unsafe extern "C" fn vs_cloud_get(cloud: *const VsCloud, i: usize, out: *mut f64) -> VsStatus {
    guard(|| {
        let c = handle(cloud)?;
        let out = slice_mut(out, VS_GAUSSIAN_FLOATS)?;
        let g = c
            .0
            .gaussians()
            .get(i)
            .ok_or(Fail::Status(VsStatus::InvalidArgument, "Gaussian index out of range"))?;
        out[..3].copy_from_slice(&g.position);
        out[3..6].copy_from_slice(&g.color);
        out[6] = g.opacity;
        out[7..10].copy_from_slice(&g.scale);
        out[10..].copy_from_slice(&g.rotation);
        Ok(())
    })
}

/// # Safety
/// `cloud` must be valid and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vs_cloud_export_ply(cloud: *const VsCloud, path: *const c_char) -> VsStatus {
    guard(|| {
        let c = handle(cloud)?;
        export_ply(&c.0, &PathBuf::from(str_arg(path)?))?;
        Ok(())
    })
}

/// Renders `cloud` from the camera of view `index` over a white
/// background into `rgb` (row-major, 3 doubles per pixel).
///
/// # Safety
/// Handles must be valid and `rgb` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vs_render(
    cloud: *const VsCloud,
    views: *const VsViews,
    index: usize,
    rgb: *mut f64,
    len: usize,
) -> VsStatus {
    guard(|| {
        let (c, v) = (handle(cloud)?, handle(views)?);
        let view = v
            .0
            .get(index)
            .ok_or(Fail::Status(VsStatus::InvalidArgument, "view index out of range"))?;
        let r = rasterize(&c.0, &view.camera, [1.0; 3])?;
        if len < r.rgb.len() {
            return Err(Fail::Status(VsStatus::BufferTooSmall, "render buffer too small"));
        }
        slice_mut(rgb, r.rgb.len())?.copy_from_slice(&r.rgb);
        Ok(())
    })
}

/// PSNR between the render of `cloud` and the stored view `index`.
///
/// # Safety
/// Handles must be valid and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_view_psnr(
    cloud: *const VsCloud,
    views: *const VsViews,
    index: usize,
    out: *mut f64,
) -> VsStatus {
    guard(|| {
        let (c, v) = (handle(cloud)?, handle(views)?);
        let view = v
            .0
            .get(index)
            .ok_or(Fail::Status(VsStatus::InvalidArgument, "view index out of range"))?;
        let r = rasterize(&c.0, &view.camera, [1.0; 3])?;
        *out_ptr(out)? = psnr(&r.rgb, &view.image.composite([1.0; 3]))?;
        Ok(())
    })
}

/// # Safety
/// `cloud` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn vs_cloud_free(cloud: *mut VsCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Match-count selection rule. `selected` receives 1 for kept candidates
/// and 0 otherwise; `threshold` may be null.
///
/// # Safety
/// `counts` and `selected` must be valid for `n` entries, `queries` for
/// `n_queries`.
#[no_mangle]
pub unsafe extern "C" fn vs_select_by_counts(
    counts: *const usize,
    n: usize,
    queries: *const usize,
    n_queries: usize,
    selected: *mut u8,
    threshold: *mut f64,
) -> VsStatus {
    guard(|| {
        let counts = slice(counts, n)?;
        let queries = slice(queries, n_queries)?;
        if queries.is_empty() || queries.iter().any(|&q| q >= n) {
            return Err(Fail::Status(VsStatus::InvalidArgument, "queries must be non-empty and in range"));
        }
        let r = select_by_counts(counts, queries);
        let sel = slice_mut(selected, n)?;
        sel.fill(0);
        for i in r.selected {
            sel[i] = 1;
        }
        if let Some(t) = threshold.as_mut() {
            *t = r.threshold;
        }
        Ok(())
    })
}
