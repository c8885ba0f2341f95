use std::ffi::{CStr, CString};
use std::ptr;

use candle_core::DType;
use dsnet::checkpoint::snapshot;
use dsnet::config::{Config, Stage};
use dsnet::model::Network;
use dsnet::pipeline::predict;
use dsnet::types::{ImagePlane, PlaneKind};
use dsnet_ffi::*;
use ndarray::{Array2, Array3};

fn small_config() -> Config {
    let mut c = Config::default();
    c.input_size = 64;
    c.encoder.channels_per_level = vec![4, 8, 8, 8];
    c.decoder.width = 8;
    c
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(dsnet_last_error()) }.to_string_lossy().into_owned()
}

fn cstring(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

/// Writes a checkpoint of a freshly initialized network and returns it.
fn saved_network(dir: &std::path::Path) -> (Network, std::path::PathBuf) {
    let cfg = small_config();
    let net = Network::new(&cfg, DType::F32, 11).unwrap();
    let ck = snapshot(&cfg, Stage::Semi, 0, &net.store).unwrap();
    let path = dir.join("model.safetensors");
    ck.save(&path).unwrap();
    (net, path)
}

fn test_image(h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
    let rgb: Vec<f32> = (0..3 * h * w).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
    let depth: Vec<f32> = (0..h * w).map(|i| (i % w) as f32 / w as f32).collect();
    (rgb, depth)
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(dsnet_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn missing_checkpoint_sets_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstring(&dir.path().join("absent.safetensors"));
    let mut model = ptr::null_mut();
    let status = unsafe { dsnet_model_load(path.as_ptr(), &mut model) };
    assert_eq!(status, DsnetStatus::MissingCheckpoint);
    assert!(model.is_null());
    assert!(last_error().contains("absent.safetensors"));
}

#[test]
fn garbage_checkpoint_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.safetensors");
    std::fs::write(&p, b"not a checkpoint").unwrap();
    let path = cstring(&p);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dsnet_model_load(path.as_ptr(), &mut model) }, DsnetStatus::InvalidCheckpoint);
}

#[test]
fn null_arguments_are_rejected() {
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dsnet_model_load(ptr::null(), &mut model) }, DsnetStatus::NullPointer);
    let mut size = 0usize;
    assert_eq!(unsafe { dsnet_model_input_size(ptr::null(), &mut size) }, DsnetStatus::NullPointer);
    let mut out = 0.0f64;
    assert_eq!(unsafe { dsnet_mae(ptr::null(), ptr::null(), 2, 2, &mut out) }, DsnetStatus::NullPointer);
    assert!(!last_error().is_empty());
    unsafe { dsnet_model_free(ptr::null_mut()) };
}

#[test]
fn inference_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (net, path) = saved_network(dir.path());
    let path = cstring(&path);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dsnet_model_load(path.as_ptr(), &mut model) }, DsnetStatus::Ok);
    assert_eq!(last_error(), "");

    let mut size = 0usize;
    assert_eq!(unsafe { dsnet_model_input_size(model, &mut size) }, DsnetStatus::Ok);
    assert_eq!(size, 64);

    let (h, w) = (48, 40);
    let (rgb, depth) = test_image(h, w);
    let mut sal = vec![-1.0f32; h * w];
    let mut used_depth = vec![-1.0f32; h * w];
    let status = unsafe {
        dsnet_model_infer(model, rgb.as_ptr(), depth.as_ptr(), h, w, sal.as_mut_ptr(), used_depth.as_mut_ptr())
    };
    assert_eq!(status, DsnetStatus::Ok, "{}", last_error());

    let rgb_plane = ImagePlane::new(PlaneKind::Rgb, Array3::from_shape_vec((3, h, w), rgb.clone()).unwrap()).unwrap();
    let depth_plane =
        ImagePlane::new(PlaneKind::Depth, Array3::from_shape_vec((1, h, w), depth.clone()).unwrap()).unwrap();
    let expected = predict(&net.model, &rgb_plane, Some(&depth_plane)).unwrap();
    assert_eq!(sal.as_slice(), expected.saliency.data().as_slice().unwrap());
    assert_eq!(used_depth.as_slice(), expected.depth.data().as_slice().unwrap());

    // Without depth the depth branch fills in.
    let status = unsafe {
        dsnet_model_infer(model, rgb.as_ptr(), ptr::null(), h, w, sal.as_mut_ptr(), used_depth.as_mut_ptr())
    };
    assert_eq!(status, DsnetStatus::Ok, "{}", last_error());
    assert!(sal.iter().chain(&used_depth).all(|v| (0.0..=1.0).contains(v)));

    let status =
        unsafe { dsnet_model_infer(model, rgb.as_ptr(), ptr::null(), 0, w, sal.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(status, DsnetStatus::InvalidArgument);
    unsafe { dsnet_model_free(model) };
}

#[test]
fn out_of_range_pixels_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = saved_network(dir.path());
    let path = cstring(&path);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dsnet_model_load(path.as_ptr(), &mut model) }, DsnetStatus::Ok);
    let (h, w) = (8, 8);
    let rgb = vec![2.0f32; 3 * h * w];
    let mut sal = vec![0.0f32; h * w];
    let status =
        unsafe { dsnet_model_infer(model, rgb.as_ptr(), ptr::null(), h, w, sal.as_mut_ptr(), ptr::null_mut()) };
    assert_ne!(status, DsnetStatus::Ok);
    assert!(!last_error().is_empty());
    unsafe { dsnet_model_free(model) };
}

#[test]
fn metrics_of_a_perfect_prediction() {
    let g: Vec<f64> = (0..64).map(|i| if (i / 8) % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let run = |f: unsafe extern "C" fn(*const f64, *const f64, usize, usize, *mut f64) -> DsnetStatus| {
        let mut out = f64::NAN;
        assert_eq!(unsafe { f(g.as_ptr(), g.as_ptr(), 8, 8, &mut out) }, DsnetStatus::Ok);
        out
    };
    assert_eq!(run(dsnet_mae), 0.0);
    assert!((run(dsnet_s_measure) - 1.0).abs() < 1e-12);
    assert!((run(dsnet_f_measure_max) - 1.0).abs() < 1e-12);
    assert!((run(dsnet_e_measure_max) - 1.0).abs() < 1e-12);
}

#[test]
fn mae_hand_case_and_empty_ground_truth() {
    let p = [1.0, 0.0, 0.0, 0.0];
    let g = [0.0; 4];
    let mut out = 0.0;
    assert_eq!(unsafe { dsnet_mae(p.as_ptr(), g.as_ptr(), 2, 2, &mut out) }, DsnetStatus::Ok);
    assert_eq!(out, 0.25);
    assert_eq!(
        unsafe { dsnet_f_measure_max(p.as_ptr(), g.as_ptr(), 2, 2, &mut out) },
        DsnetStatus::EmptyGroundTruth
    );
}

#[test]
fn read_gray_reports_size_then_fills_buffer() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("mask.png");
    let values = Array2::from_shape_fn((5, 7), |(y, x)| if x > y { 1.0 } else { 0.0 });
    dsnet::imageio::write_gray8(&p, &values).unwrap();
    let path = cstring(&p);
    let (mut h, mut w) = (0usize, 0usize);
    assert_eq!(unsafe { dsnet_read_gray(path.as_ptr(), ptr::null_mut(), &mut h, &mut w) }, DsnetStatus::Ok);
    assert_eq!((h, w), (5, 7));
    let mut buf = vec![0.0f64; h * w];
    assert_eq!(unsafe { dsnet_read_gray(path.as_ptr(), buf.as_mut_ptr(), &mut h, &mut w) }, DsnetStatus::Ok);
    assert_eq!(buf.as_slice(), values.as_slice().unwrap());

    let (mut h2, mut w2) = (2usize, 2usize);
    assert_eq!(
        unsafe { dsnet_read_gray(path.as_ptr(), buf.as_mut_ptr(), &mut h2, &mut w2) },
        DsnetStatus::ShapeMismatch
    );
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dsnet.h")).unwrap();
    for name in [
        "DSNET_H",
        "typedef struct DsnetModel DsnetModel",
        "DSNET_STATUS_OK",
        "DSNET_STATUS_PANIC",
        "dsnet_last_error",
        "dsnet_version",
        "dsnet_model_load",
        "dsnet_model_free",
        "dsnet_model_input_size",
        "dsnet_model_infer",
        "dsnet_mae",
        "dsnet_s_measure",
        "dsnet_f_measure_max",
        "dsnet_e_measure_max",
        "dsnet_read_gray",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
