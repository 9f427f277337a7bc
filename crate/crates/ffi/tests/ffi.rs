use std::ffi::{CStr, CString};
use std::ptr;

use posefree_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pf_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

const SMALL: &str = r#"{"res": 8, "patch": 4, "width": 8, "heads": 2, "backbone_blocks": 1,
    "encoder_blocks": 1, "mapping_blocks": 1, "volume_res": 2, "field_res": 8,
    "feature_channels": 4, "decoder_channels": [4, 4], "render": {"n_samples": 8, "density_scale": 4.0}}"#;

fn small_model() -> *mut PfModel {
    let cfg = CString::new(SMALL).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { pf_model_new(cfg.as_ptr(), 3, &mut m) },
        PfStatus::Ok,
        "{}",
        last_error()
    );
    assert!(!m.is_null());
    m
}

fn images(k: usize, res: usize) -> Vec<f32> {
    (0..k * res * res * 3)
        .map(|i| ((i * 37) % 101) as f32 / 100.0)
        .collect()
}

#[test]
fn forward_render_round_trip() {
    let m = small_model();
    let (mut res, mut params) = (0, 0);
    assert_eq!(
        unsafe { pf_model_info(m, &mut res, &mut params) },
        PfStatus::Ok
    );
    assert_eq!(res, 8);
    assert!(params > 0);

    let imgs = images(2, res);
    let mut field = ptr::null_mut();
    assert_eq!(
        unsafe { pf_model_forward(m, imgs.as_ptr(), 2, 1, &mut field) },
        PfStatus::Ok,
        "{}",
        last_error()
    );
    let (mut dims, mut c) = ([0usize; 3], 0);
    assert_eq!(
        unsafe { pf_field_dims(field, dims.as_mut_ptr(), &mut c) },
        PfStatus::Ok
    );
    assert_eq!((dims, c), ([8, 8, 8], 4));
    let mut density = vec![0f32; 512];
    assert_eq!(
        unsafe { pf_field_density(field, density.as_mut_ptr(), 512) },
        PfStatus::Ok
    );
    assert!(density.iter().all(|d| *d >= 0.0 && d.is_finite()));

    let pose = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let mut rgb = vec![-1f32; res * res * 3];
    let mut mask = vec![-1f32; res * res];
    let st = unsafe {
        pf_render(
            m,
            field,
            pose.as_ptr(),
            8.0,
            8.0,
            4.0,
            4.0,
            rgb.as_mut_ptr(),
            mask.as_mut_ptr(),
        )
    };
    assert_eq!(st, PfStatus::Ok, "{}", last_error());
    assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(mask.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(last_error().is_empty());

    unsafe {
        pf_field_free(field);
        pf_model_free(m);
    }
}

#[test]
fn errors_are_codes_with_messages() {
    let m = small_model();
    let imgs = images(2, 8);
    let mut field = ptr::null_mut();
    assert_eq!(
        unsafe { pf_model_forward(m, imgs.as_ptr(), 2, 2, &mut field) },
        PfStatus::InvalidArgument
    );
    assert!(last_error().contains("canonical"));
    assert_eq!(
        unsafe { pf_model_forward(m, ptr::null(), 2, 0, &mut field) },
        PfStatus::NullArgument
    );
    assert!(field.is_null());

    let bad = CString::new(r#"{"res": 7}"#).unwrap();
    let mut m2 = ptr::null_mut();
    assert_eq!(
        unsafe { pf_model_new(bad.as_ptr(), 0, &mut m2) },
        PfStatus::Config
    );
    assert!(last_error().contains("res"));
    let unknown = CString::new(r#"{"nope": 1}"#).unwrap();
    assert_eq!(
        unsafe { pf_model_new(unknown.as_ptr(), 0, &mut m2) },
        PfStatus::Config
    );

    let missing = CString::new("/nonexistent/checkpoint.json").unwrap();
    assert_eq!(
        unsafe { pf_model_load(missing.as_ptr(), &mut m2) },
        PfStatus::Io
    );
    assert!(last_error().contains("/nonexistent/checkpoint.json"));
    assert!(m2.is_null());

    assert_eq!(
        unsafe { pf_model_forward(m, imgs.as_ptr(), 2, 0, &mut field) },
        PfStatus::Ok
    );
    let skew = [1.0, 0.5, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let st = unsafe {
        pf_render(
            m,
            field,
            skew.as_ptr(),
            8.0,
            8.0,
            4.0,
            4.0,
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, PfStatus::InvalidArgument);
    let mut d = vec![0f32; 3];
    assert_eq!(
        unsafe { pf_field_density(field, d.as_mut_ptr(), 3) },
        PfStatus::InvalidArgument
    );
    unsafe {
        pf_field_free(field);
        pf_model_free(m);
        pf_model_free(ptr::null_mut());
        pf_field_free(ptr::null_mut());
    }
}

#[test]
fn metrics_match_analytic_values() {
    let a = vec![0.5f32; 16 * 16 * 3];
    let b = vec![0.6f32; 16 * 16 * 3];
    let mut out = 0.0;
    assert_eq!(
        unsafe { pf_psnr(a.as_ptr(), b.as_ptr(), 16, 16, 3, &mut out) },
        PfStatus::Ok
    );
    assert!((out - 20.0).abs() < 1e-4, "{out}");
    assert_eq!(
        unsafe { pf_ssim(a.as_ptr(), a.as_ptr(), 16, 16, 3, &mut out) },
        PfStatus::Ok
    );
    assert_eq!(out, 1.0);
    assert_eq!(
        unsafe { pf_psnr(a.as_ptr(), b.as_ptr(), 16, 16, 2, &mut out) },
        PfStatus::InvalidArgument
    );
}

#[test]
fn checkpoint_loads_through_the_c_api() {
    use posefree::model::{Model, ModelConfig};
    use posefree::train::save_checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let cfg: ModelConfig = serde_json::from_str(SMALL).unwrap();
    let (model, store) = Model::new::<f32>(&cfg, 5).unwrap();
    save_checkpoint(dir.path(), "ck", &model, &store, 0, 5).unwrap();
    let path = CString::new(dir.path().join("ck.json").to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { pf_model_load(path.as_ptr(), &mut m) },
        PfStatus::Ok,
        "{}",
        last_error()
    );
    let (mut res, mut params) = (0, 0);
    unsafe { pf_model_info(m, &mut res, &mut params) };
    assert_eq!(params, store.numel());
    unsafe { pf_model_free(m) };
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/posefree.h"))
        .unwrap();
    for f in [
        "pf_model_new",
        "pf_model_load",
        "pf_model_free",
        "pf_model_forward",
        "pf_field_density",
        "pf_render",
        "pf_psnr",
        "pf_ssim",
        "pf_last_error_message",
        "PF_STATUS_OK",
    ] {
        assert!(h.contains(f), "header lacks {f}");
    }
}
