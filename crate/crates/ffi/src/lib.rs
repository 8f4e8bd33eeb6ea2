//! C interface to the detector.
//!
//! Every fallible function returns a [`MasfStatus`]; on failure the message
//! is available from [`masf_last_error`] on the same thread. Handles are
//! opaque and released with their matching `_free` function. No function
//! unwinds across the boundary: panics become `MASF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use masf_core::data::{letterbox, AnnotationFormat, Dataset, InMemoryDataset, ManifestDataset};
use masf_core::network::{Model, ModelConfig};
use masf_core::postproc::Detection;
use masf_core::train::{cosine_lr, detect_batch, evaluate_model, load_checkpoint, EvalSettings, TrainConfig};
use masf_core::{MasfError, Shape, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MasfStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Numerical = 4,
    InvalidArgument = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct MasfModel {
    model: Model,
}

/// Opaque list of detections.
pub struct MasfDetections {
    items: Vec<Detection>,
}

/// One detection in the pixel coordinates of the input image.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MasfDetection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub class_id: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MasfEvalSummary {
    pub map50: f64,
    pub map5095: f64,
    pub precision: f64,
    pub recall: f64,
    pub images: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MasfStatus, String);

impl From<MasfError> for Failure {
    fn from(e: MasfError) -> Self {
        let status = match e.exit_code() {
            2 => MasfStatus::Config,
            4 => MasfStatus::Numerical,
            _ => MasfStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MasfStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MasfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MasfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            MasfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MasfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(MasfStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(MasfStatus::NullPointer, format!("{what} is null")))
}

/// Message of the last failure on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn masf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn masf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialised model from a JSON config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn masf_model_from_config_json(config_json: *const c_char, seed: u64, out: *mut *mut MasfModel) -> MasfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let config = ModelConfig::from_json(str_arg(config_json, "config_json")?)?;
        let model = Model::new(config, seed)?;
        *out = Box::into_raw(Box::new(MasfModel { model }));
        Ok(())
    })
}

/// Loads a checkpoint written by training (`<name>.json` next to `<name>.bin`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn masf_model_load_checkpoint(path: *const c_char, out: *mut *mut MasfModel) -> MasfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let (model, _) = load_checkpoint(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(MasfModel { model }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn masf_model_free(model: *mut MasfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn masf_model_param_count(model: *const MasfModel, out: *mut u64) -> MasfStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        *out_arg(out, "out")? = m.model.count_params() as u64;
        Ok(())
    })
}

/// GFLOPs of one forward pass at `image_size`; 0 means the model's own size.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn masf_model_gflops(model: *const MasfModel, image_size: u32, out: *mut f64) -> MasfStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let size = if image_size == 0 { m.model.config.image_size } else { image_size as usize };
        *out_arg(out, "out")? = m.model.estimate_gflops(size)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn masf_model_input_info(model: *const MasfModel, image_size: *mut u32, num_classes: *mut u32) -> MasfStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        *out_arg(image_size, "image_size")? = m.model.config.image_size as u32;
        *out_arg(num_classes, "num_classes")? = m.model.config.num_classes as u32;
        Ok(())
    })
}

/// Runs detection on one planar RGB image (`3·height·width` doubles in
/// [0,1], channel-major). The image is letterboxed to the model size and
/// the boxes are mapped back to its pixel grid.
///
/// # Safety
/// `pixels` must point to `3·height·width` readable doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn masf_detect(
    model: *const MasfModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    score_threshold: f64,
    nms_iou: f64,
    out: *mut *mut MasfDetections,
) -> MasfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let m = ref_arg(model, "model")?;
        if pixels.is_null() {
            return Err(Failure(MasfStatus::NullPointer, "pixels is null".into()));
        }
        if height == 0 || width == 0 {
            return Err(invalid("image must be non-empty"));
        }
        if !(0.0..=1.0).contains(&score_threshold) || !(0.0..=1.0).contains(&nms_iou) {
            return Err(invalid("score_threshold and nms_iou must lie in [0, 1]"));
        }
        let data = std::slice::from_raw_parts(pixels, 3 * height * width).to_vec();
        let image = Tensor::new(Shape::new(1, 3, height, width), data)?;
        let (input, lb) = letterbox(&image, m.model.config.image_size)?;
        let settings = EvalSettings {
            score_threshold,
            nms_iou,
            ..EvalSettings::default()
        };
        let (mut dets, _) = detect_batch(&m.model, &input, &settings)?;
        let items = dets
            .swap_remove(0)
            .into_iter()
            .map(|d| Detection {
                bbox: lb.inverse(&d.bbox).clip(width as f64, height as f64),
                ..d
            })
            .collect();
        *out = Box::into_raw(Box::new(MasfDetections { items }));
        Ok(())
    })
}

/// Number of detections; 0 for NULL.
///
/// # Safety
/// `dets` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn masf_detections_len(dets: *const MasfDetections) -> usize {
    dets.as_ref().map_or(0, |d| d.items.len())
}

/// Copies detection `index` (score-descending order) into `out`.
///
/// # Safety
/// `dets` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn masf_detections_get(dets: *const MasfDetections, index: usize, out: *mut MasfDetection) -> MasfStatus {
    guard(|| {
        let d = ref_arg(dets, "dets")?;
        let item = d.items.get(index).ok_or_else(|| invalid(format!("index {index} out of range ({})", d.items.len())))?;
        *out_arg(out, "out")? = MasfDetection {
            x1: item.bbox.x1,
            y1: item.bbox.y1,
            x2: item.bbox.x2,
            y2: item.bbox.y2,
            score: item.score,
            class_id: item.class_id as u32,
        };
        Ok(())
    })
}

/// Releases a detection list. NULL is ignored.
///
/// # Safety
/// `dets` must come from [`masf_detect`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn masf_detections_free(dets: *mut MasfDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

/// Evaluates a model on a manifest. `split` and `format` may be NULL (all
/// items, manifest's own format); `format` is `"visdrone"` or `"internal"`.
///
/// # Safety
/// String arguments must be NUL-terminated (or NULL where allowed); `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn masf_evaluate_manifest(
    model: *const MasfModel,
    manifest_path: *const c_char,
    split: *const c_char,
    format: *const c_char,
    out: *mut MasfEvalSummary,
) -> MasfStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let path = str_arg(manifest_path, "manifest_path")?;
        let split = if split.is_null() { None } else { Some(str_arg(split, "split")?) };
        let format = if format.is_null() {
            None
        } else {
            Some(str_arg(format, "format")?.parse::<AnnotationFormat>().map_err(|e| invalid(e.to_string()))?)
        };
        let ds = ManifestDataset::open(Path::new(path), split, format, m.model.config.image_size)?;
        if ds.is_empty() {
            return Err(Failure(MasfStatus::Data, format!("{path}: no items in split {split:?}")));
        }
        let data = InMemoryDataset::collect(&ds)?;
        let (r, _) = evaluate_model(&m.model, &data, &EvalSettings::default())?;
        *out_arg(out, "out")? = MasfEvalSummary {
            map50: r.map50,
            map5095: r.map5095,
            precision: r.precision,
            recall: r.recall,
            images: r.images as u64,
        };
        Ok(())
    })
}

/// Cosine-annealed learning rate at `step` of `total_steps`, decaying from
/// `lr0` to `lr0·final_fraction`. Returns NaN for invalid arguments.
#[no_mangle]
pub extern "C" fn masf_cosine_lr(step: u64, total_steps: u64, lr0: f64, final_fraction: f64) -> f64 {
    let cfg = TrainConfig {
        lr0,
        lr_final_fraction: final_fraction,
        ..TrainConfig::default()
    };
    if cfg.validate().is_err() {
        set_error("lr0 must be positive and final_fraction in [0, 1]".into());
        return f64::NAN;
    }
    cosine_lr(step as usize, total_steps as usize, &cfg)
}
