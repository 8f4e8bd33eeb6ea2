use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::ptr;

use masf_core::data::{export_synthetic, GenConfig};
use masf_core::network::{Model, ModelConfig};
use masf_core::train::{save_checkpoint, CheckpointMeta};
use masf_ffi::*;

fn last_error() -> String {
    let p = masf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 64,
        ..ModelConfig::tiny(3)
    }
}

fn model_from(cfg: &ModelConfig, seed: u64) -> *mut MasfModel {
    let json = CString::new(cfg.to_json()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { masf_model_from_config_json(json.as_ptr(), seed, &mut m) }, MasfStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn model_accounting_matches_core() {
    let cfg = small_config();
    let m = model_from(&cfg, 3);
    let reference = Model::new(cfg.clone(), 3).unwrap();
    let (mut params, mut gflops, mut size, mut nc) = (0u64, 0f64, 0u32, 0u32);
    unsafe {
        assert_eq!(masf_model_param_count(m, &mut params), MasfStatus::Ok);
        assert_eq!(masf_model_gflops(m, 0, &mut gflops), MasfStatus::Ok);
        assert_eq!(masf_model_input_info(m, &mut size, &mut nc), MasfStatus::Ok);
        masf_model_free(m);
    }
    assert_eq!(params as usize, reference.count_params());
    assert_eq!(gflops, reference.estimate_gflops(64).unwrap());
    assert_eq!((size, nc), (64, 3));
}

#[test]
fn errors_are_reported_per_thread() {
    let mut m = ptr::null_mut();
    let bad = CString::new(r#"{"num_classes": 3}"#).unwrap();
    assert_eq!(unsafe { masf_model_from_config_json(bad.as_ptr(), 0, &mut m) }, MasfStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("model config"));
    assert_eq!(unsafe { masf_model_from_config_json(ptr::null(), 0, &mut m) }, MasfStatus::NullPointer);
    assert!(last_error().contains("config_json"));
    let missing = CString::new("/nonexistent/ckpt.json").unwrap();
    assert_eq!(unsafe { masf_model_load_checkpoint(missing.as_ptr(), &mut m) }, MasfStatus::Data);
    // Another thread sees no error of its own.
    std::thread::spawn(|| assert!(masf_last_error().is_null())).join().unwrap();
    let mut n = 0u64;
    assert_eq!(unsafe { masf_model_param_count(ptr::null(), &mut n) }, MasfStatus::NullPointer);
    unsafe { masf_model_free(ptr::null_mut()) };
}

#[test]
fn detection_maps_back_to_input_pixels() {
    let m = model_from(&small_config(), 1);
    let (h, w) = (48usize, 100usize);
    let pixels: Vec<f64> = (0..3 * h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    let mut dets = ptr::null_mut();
    unsafe {
        assert_eq!(masf_detect(m, pixels.as_ptr(), h, w, 0.0, 0.5, &mut dets), MasfStatus::Ok);
        let n = masf_detections_len(dets);
        assert!(n > 0);
        let mut prev = f64::INFINITY;
        for i in 0..n {
            let mut d = MasfDetection::default();
            assert_eq!(masf_detections_get(dets, i, &mut d), MasfStatus::Ok);
            assert!(d.x1 >= 0.0 && d.x2 <= w as f64 && d.y1 >= 0.0 && d.y2 <= h as f64);
            assert!(d.score <= prev && d.class_id < 3);
            prev = d.score;
        }
        let mut d = MasfDetection::default();
        assert_eq!(masf_detections_get(dets, n, &mut d), MasfStatus::InvalidArgument);
        masf_detections_free(dets);
        assert_eq!(masf_detect(m, pixels.as_ptr(), h, w, 1.5, 0.5, &mut dets), MasfStatus::InvalidArgument);
        assert_eq!(masf_detect(m, ptr::null(), h, w, 0.5, 0.5, &mut dets), MasfStatus::NullPointer);
        assert_eq!(masf_detections_len(ptr::null()), 0);
        masf_model_free(m);
    }
}

#[test]
fn checkpoint_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig {
        image_size: 64,
        ..GenConfig::default()
    };
    let manifest = export_synthetic(dir.path(), &gen, 0, &[("train", 2), ("val", 3)]).unwrap();
    let model = Model::new(small_config(), 2).unwrap();
    let ckpt = save_checkpoint(&model, &CheckpointMeta::default(), &dir.path().join("m")).unwrap();

    let path = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { masf_model_load_checkpoint(path.as_ptr(), &mut m) }, MasfStatus::Ok);
    let mpath = CString::new(manifest.to_str().unwrap()).unwrap();
    let split = CString::new("val").unwrap();
    let mut s = MasfEvalSummary::default();
    assert_eq!(
        unsafe { masf_evaluate_manifest(m, mpath.as_ptr(), split.as_ptr(), ptr::null(), &mut s) },
        MasfStatus::Ok,
        "{}",
        last_error()
    );
    assert_eq!(s.images, 3);
    assert!((0.0..=1.0).contains(&s.map50) && s.map5095 <= s.map50);
    let fmt = CString::new("yolo").unwrap();
    assert_eq!(
        unsafe { masf_evaluate_manifest(m, mpath.as_ptr(), split.as_ptr(), fmt.as_ptr(), &mut s) },
        MasfStatus::InvalidArgument
    );
    let none = CString::new("test").unwrap();
    assert_eq!(unsafe { masf_evaluate_manifest(m, mpath.as_ptr(), none.as_ptr(), ptr::null(), &mut s) }, MasfStatus::Data);
    unsafe { masf_model_free(m) };
}

#[test]
fn schedule_values() {
    assert!((masf_cosine_lr(0, 100, 0.01, 0.01) - 0.01).abs() < 1e-12);
    assert!((masf_cosine_lr(100, 100, 0.01, 0.01) - 1e-4).abs() < 1e-12);
    assert!((masf_cosine_lr(50, 100, 0.01, 0.01) - 0.00505).abs() < 1e-12);
    assert!(masf_cosine_lr(0, 100, -1.0, 0.01).is_nan());
    assert!(!unsafe { CStr::from_ptr(masf_version()) }.to_bytes().is_empty());
}

fn target_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    let lib = target_dir().join("libmasf_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "masf.h"
int main(void) {
    const char *cfg = "{\"num_classes\":2,\"image_size\":64,\"width_mult\":0.25,\"depth_mult\":0.33,"
        "\"levels\":[\"P3\",\"P4\",\"P5\"],\"use_mfam\":false,\"use_iema\":false,\"use_dasi\":false,"
        "\"use_skips\":false,\"use_p2\":false,\"iema_groups\":8,\"mfam_kernels\":[3,5,7]}";
    MasfModel *m = NULL;
    if (masf_model_from_config_json(cfg, 0, &m) != MASF_STATUS_OK) { puts(masf_last_error()); return 1; }
    uint64_t n = 0;
    masf_model_param_count(m, &n);
    static double px[3 * 40 * 70];
    for (size_t i = 0; i < sizeof px / sizeof px[0]; i++) px[i] = (double)(i % 17) / 16.0;
    MasfDetections *d = NULL;
    if (masf_detect(m, px, 40, 70, 0.0, 0.5, &d) != MASF_STATUS_OK) return 2;
    printf("%llu %zu\n", (unsigned long long)n, masf_detections_len(d));
    masf_detections_free(d);
    masf_model_free(m);
    if (masf_model_from_config_json("{", 0, &m) != MASF_STATUS_CONFIG) return 3;
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let st = std::process::Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(st.success());
    let out = std::process::Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{:?}", out);
    let text = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<u64> = text.split_whitespace().map(|v| v.parse().unwrap()).collect();
    let expected = Model::new(
        ModelConfig {
            image_size: 64,
            ..ModelConfig::baseline_tiny(2)
        },
        0,
    )
    .unwrap()
    .count_params();
    assert_eq!(fields[0] as usize, expected);
    assert!(fields[1] > 0);
}
