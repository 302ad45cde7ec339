use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use colfield::bev::BevConfig;
use colfield::encoding::HashGridConfig;
use colfield::fields::FieldConfig;
use colfield::mlp::Activation;
use colfield::templates::template;
use colfield::train::{Model, TrainConfig, TrainState};
use colfield_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = cf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn tiny_checkpoint(path: &Path) {
    let scene = template("static-room", 0).unwrap();
    let field = FieldConfig {
        grid: HashGridConfig {
            levels: 2,
            base_resolution: 8,
            max_resolution: 16,
            log2_table_size: 10,
            features_per_level: 2,
        },
        hidden_width: 8,
        hidden_layers: 1,
        activation: Activation::Relu,
        dir_frequencies: 1,
        code_dim: 2,
    };
    let bev = BevConfig {
        dims: [4, 4, 8],
        ..Default::default()
    };
    let model = Model::build(&scene, &[], &field, &bev, 0).unwrap();
    let state = TrainState::new(TrainConfig::default(), model).unwrap();
    colfield::checkpoint::save(&state, path).unwrap();
}

#[test]
fn scene_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().join("scene.toml").to_str().unwrap());
    unsafe {
        let mut scene = ptr::null_mut();
        assert_eq!(cf_scene_from_template(c("moving-box").as_ptr(), 3, &mut scene), CfStatus::Ok);
        assert_eq!(cf_scene_view_count(scene), 20);
        assert_eq!(cf_scene_save(scene, path.as_ptr()), CfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(cf_scene_load(path.as_ptr(), &mut back), CfStatus::Ok);
        assert_eq!(cf_scene_view_count(back), 20);
        cf_scene_free(scene);
        cf_scene_free(back);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut scene = ptr::null_mut();
        assert_eq!(cf_scene_from_template(c("no-such").as_ptr(), 0, &mut scene), CfStatus::Config);
        assert!(scene.is_null());
        assert!(last_error().contains("unknown template"));

        assert_eq!(cf_scene_from_template(ptr::null(), 0, &mut scene), CfStatus::NullPointer);
        assert_eq!(
            cf_scene_from_template(c("static-room").as_ptr(), 0, ptr::null_mut()),
            CfStatus::NullPointer
        );

        let mut model = ptr::null_mut();
        assert_eq!(cf_model_load(c("/nonexistent/ckpt").as_ptr(), &mut model), CfStatus::Io);

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.cfck");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        let junk = c(junk.to_str().unwrap());
        assert_eq!(cf_model_load(junk.as_ptr(), &mut model), CfStatus::Corrupt);

        assert_eq!(cf_scene_view_count(ptr::null()), 0);
        cf_scene_free(ptr::null_mut());
        cf_model_free(ptr::null_mut());
        cf_image_free(ptr::null_mut());
    }
}

#[test]
fn render_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.cfck");
    tiny_checkpoint(&ckpt);
    let ckpt = c(ckpt.to_str().unwrap());
    let ppm = c(dir.path().join("v.ppm").to_str().unwrap());
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(cf_model_load(ckpt.as_ptr(), &mut model), CfStatus::Ok);
        let (mut s, mut d) = (7u64, 7u64);
        assert_eq!(cf_model_steps(model, &mut s, &mut d), CfStatus::Ok);
        assert_eq!((s, d), (0, 0));
        let mut scene = ptr::null_mut();
        assert_eq!(cf_scene_from_template(c("static-room").as_ptr(), 0, &mut scene), CfStatus::Ok);

        let mut img = ptr::null_mut();
        let st = cf_render_view(model, scene, c("a").as_ptr(), c("left").as_ptr(), 2, 8, &mut img);
        assert_eq!(st, CfStatus::Ok);
        let (mut w, mut h) = (0usize, 0usize);
        assert_eq!(cf_image_size(img, &mut w, &mut h), CfStatus::Ok);
        assert_eq!((w, h), (64, 64));
        let mut px = vec![0.0; 3 * w * h];
        assert_eq!(cf_image_pixels(img, px.as_mut_ptr(), px.len()), CfStatus::Ok);
        assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(cf_image_pixels(img, px.as_mut_ptr(), 5), CfStatus::ShapeMismatch);

        let mut same = 0.0;
        assert_eq!(cf_psnr(img, img, &mut same), CfStatus::Ok);
        assert_eq!(same, f64::INFINITY);

        assert_eq!(cf_image_write_ppm(img, ppm.as_ptr()), CfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(cf_image_read_ppm(ppm.as_ptr(), &mut back), CfStatus::Ok);
        let mut p = 0.0;
        assert_eq!(cf_psnr(img, back, &mut p), CfStatus::Ok);
        // 8-bit quantization bounds the error by half a level.
        assert!(p > 50.0, "{p}");

        let mut bad = ptr::null_mut();
        let st = cf_render_view(model, scene, c("zz").as_ptr(), c("left").as_ptr(), 2, 8, &mut bad);
        assert_eq!(st, CfStatus::InvalidInput);

        cf_image_free(img);
        cf_image_free(back);
        cf_scene_free(scene);
        cf_model_free(model);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(cf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/colfield.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "cf_last_error",
        "cf_version",
        "cf_scene_from_template",
        "cf_scene_load",
        "cf_scene_save",
        "cf_scene_view_count",
        "cf_scene_free",
        "cf_model_load",
        "cf_model_save",
        "cf_model_steps",
        "cf_model_free",
        "cf_render_view",
        "cf_image_read_ppm",
        "cf_image_write_ppm",
        "cf_image_size",
        "cf_image_pixels",
        "cf_image_free",
        "cf_psnr",
        "CF_STATUS_OK",
        "typedef struct CfScene CfScene",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    // The header must be valid C on its own.
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
