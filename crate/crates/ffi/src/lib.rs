//! C interface to posefree models.
//!
//! Every fallible function returns a [`PfStatus`]; on failure the message is
//! available from [`pf_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use posefree::geometry::{CameraPose, Intrinsics};
use posefree::model::{Model, ModelConfig, ModelInput, PoseMetadata};
use posefree::nn::{Binding, ParamStore};
use posefree::render::RadianceField;
use posefree::tensor::{Graph, Tensor};
use posefree::train::{load_checkpoint, psnr, ssim};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Panic = 5,
}

/// A model and its weights.
pub struct PfModel {
    model: Model,
    store: ParamStore<f32>,
}

/// A decoded radiance field.
pub struct PfField {
    density: Tensor<f32>,
    features: Tensor<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

type FfiResult = Result<(), (PfStatus, String)>;

fn guard(f: impl FnOnce() -> FfiResult) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            PfStatus::Panic
        }
    }
}

fn null(what: &str) -> (PfStatus, String) {
    (PfStatus::NullArgument, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (PfStatus, String) {
    (PfStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(
    p: *const T,
    len: usize,
    what: &str,
) -> Result<&'a [T], (PfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(
    p: *mut T,
    len: usize,
    what: &str,
) -> Result<&'a mut [T], (PfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn pf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a randomly initialized model. `config_json` is a model
/// configuration object, or null for the defaults.
///
/// # Safety
/// `config_json` must be null or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_model_new(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut PfModel,
) -> PfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_json.is_null() {
            ModelConfig::default()
        } else {
            let text = str_arg(config_json, "config_json")?;
            serde_json::from_str(text)
                .map_err(|e| (PfStatus::Config, format!("model config: {e}")))?
        };
        let (model, store) =
            Model::new::<f32>(&cfg, seed).map_err(|e| (PfStatus::Config, e.to_string()))?;
        *out = Box::into_raw(Box::new(PfModel { model, store }));
        Ok(())
    })
}

/// Loads a checkpoint from the metadata file written by training.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_model_load(path: *const c_char, out: *mut *mut PfModel) -> PfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let (model, store, _) =
            load_checkpoint::<f32>(Path::new(path)).map_err(|e| (PfStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(PfModel { model, store }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from `pf_model_new`/`pf_model_load`
/// that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn pf_model_free(model: *mut PfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input image edge length and number of trainable scalars.
///
/// # Safety
/// `model` must be a live handle; `res` and `params` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_model_info(
    model: *const PfModel,
    res: *mut usize,
    params: *mut usize,
) -> PfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if res.is_null() || params.is_null() {
            return Err(null("res/params"));
        }
        *res = m.model.cfg.res;
        *params = m.store.numel();
        Ok(())
    })
}

/// Runs the pose-free forward pass on `k` images laid out `[k, res, res, 3]`
/// with values in `[0, 1]`, hosting the field in view `canonical`.
///
/// # Safety
/// `images` must hold `k * res * res * 3` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_model_forward(
    model: *const PfModel,
    images: *const f32,
    k: usize,
    canonical: usize,
    out: *mut *mut PfField,
) -> PfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if k == 0 || canonical >= k {
            return Err(invalid(format!(
                "need 0 <= canonical < k, got canonical {canonical}, k {k}"
            )));
        }
        if m.model.projection.is_some() {
            return Err(invalid(
                "projection models need input poses and are not exposed",
            ));
        }
        let res = m.model.cfg.res;
        let n = res * res * 3;
        let data = slice_arg(images, k * n, "images")?;
        let input = ModelInput {
            images: data
                .chunks(n)
                .map(|c| Tensor::new(&[res, res, 3], c.to_vec()))
                .collect(),
            poses: PoseMetadata::new(Vec::new()),
            intrinsics: Intrinsics::centered(res, 1.0),
        };
        let g = Graph::new();
        let b = Binding::new(&g, &m.store, false);
        let f = m.model.forward(&b, &input, canonical).field;
        *out = Box::into_raw(Box::new(PfField {
            density: f.density.value().as_ref().clone(),
            features: f.features.value().as_ref().clone(),
        }));
        Ok(())
    })
}

/// # Safety
/// `field` must be null or a live handle from `pf_model_forward`.
#[no_mangle]
pub unsafe extern "C" fn pf_field_free(field: *mut PfField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Grid size `[x, y, z]` and feature channel count.
///
/// # Safety
/// `dims` must hold 3 values; `channels` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_field_dims(
    field: *const PfField,
    dims: *mut usize,
    channels: *mut usize,
) -> PfStatus {
    guard(|| {
        let f = field.as_ref().ok_or_else(|| null("field"))?;
        let d = slice_mut_arg(dims, 3, "dims")?;
        if channels.is_null() {
            return Err(null("channels"));
        }
        d.copy_from_slice(&f.density.shape()[..3]);
        *channels = f.features.shape()[3];
        Ok(())
    })
}

/// Copies the density grid, x slowest, into `out` of length `len`.
///
/// # Safety
/// `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn pf_field_density(
    field: *const PfField,
    out: *mut f32,
    len: usize,
) -> PfStatus {
    guard(|| {
        let f = field.as_ref().ok_or_else(|| null("field"))?;
        let n = f.density.numel();
        if len != n {
            return Err(invalid(format!(
                "density has {n} values, buffer holds {len}"
            )));
        }
        slice_mut_arg(out, n, "out")?.copy_from_slice(f.density.data());
        Ok(())
    })
}

/// Renders `field` from `pose`, a row-major 3x4 camera-to-canonical
/// transform (camera-to-world for world-frame models), with pinhole
/// intrinsics `fx, fy, cx, cy` at the model resolution. Writes
/// `[res, res, 3]` colors to `rgb` and `[res, res]` opacity to `mask`
/// (either may be null).
///
/// # Safety
/// `pose` must hold 12 doubles; non-null outputs must hold the sizes above.
#[no_mangle]
pub unsafe extern "C" fn pf_render(
    model: *const PfModel,
    field: *const PfField,
    pose: *const f64,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rgb: *mut f32,
    mask: *mut f32,
) -> PfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let f = field.as_ref().ok_or_else(|| null("field"))?;
        let p: &[f64; 12] = slice_arg(pose, 12, "pose")?.try_into().expect("12 values");
        let pose = CameraPose::from_matrix_3x4(p);
        if !pose.is_valid(1e-6) {
            return Err(invalid("pose is not a rigid transform"));
        }
        let res = m.model.cfg.res;
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            res,
        };
        if !k.is_valid() {
            return Err(invalid("invalid intrinsics"));
        }
        if f.features.shape()[3] != m.model.cfg.feature_channels {
            return Err(invalid("field was not produced by this model"));
        }
        let g = Graph::new();
        let b = Binding::new(&g, &m.store, false);
        let field = RadianceField {
            density: g.constant(f.density.clone()),
            features: g.constant(f.features.clone()),
        };
        let r = m.model.render_midpoint(&b, &field, &pose, &k);
        if !rgb.is_null() {
            slice_mut_arg(rgb, res * res * 3, "rgb")?.copy_from_slice(r.image.value().data());
        }
        if !mask.is_null() {
            slice_mut_arg(mask, res * res, "mask")?.copy_from_slice(r.mask.value().data());
        }
        Ok(())
    })
}

unsafe fn metric(
    pred: *const f32,
    gt: *const f32,
    h: usize,
    w: usize,
    channels: usize,
    out: *mut f64,
    f: fn(&Tensor<f32>, &Tensor<f32>) -> f64,
) -> FfiResult {
    if out.is_null() {
        return Err(null("out"));
    }
    if h == 0 || w == 0 || !(channels == 1 || channels == 3) {
        return Err(invalid("need h, w > 0 and 1 or 3 channels"));
    }
    let n = h * w * channels;
    let shape: Vec<usize> = if channels == 1 {
        vec![h, w]
    } else {
        vec![h, w, 3]
    };
    let a = Tensor::new(&shape, slice_arg(pred, n, "pred")?.to_vec());
    let b = Tensor::new(&shape, slice_arg(gt, n, "gt")?.to_vec());
    *out = f(&a, &b);
    Ok(())
}

/// PSNR in dB of `[h, w, channels]` images in `[0, 1]`, capped at 99.
///
/// # Safety
/// `pred` and `gt` must hold `h * w * channels` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_psnr(
    pred: *const f32,
    gt: *const f32,
    h: usize,
    w: usize,
    channels: usize,
    out: *mut f64,
) -> PfStatus {
    guard(|| metric(pred, gt, h, w, channels, out, psnr))
}

/// Mean SSIM of `[h, w, channels]` images (channel mean as grayscale).
///
/// # Safety
/// `pred` and `gt` must hold `h * w * channels` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_ssim(
    pred: *const f32,
    gt: *const f32,
    h: usize,
    w: usize,
    channels: usize,
    out: *mut f64,
) -> PfStatus {
    guard(|| metric(pred, gt, h, w, channels, out, ssim))
}
