//! C ABI over the tcam pipeline.
//!
//! Every function returns a [`TcamStatus`]; on failure the message is kept in
//! a per-thread slot readable with [`tcam_last_error`]. Models are passed
//! around as opaque [`TcamBackbone`] pointers owned by the caller and
//! released with [`tcam_backbone_free`]. Images are planar `3 × H × W`
//! float buffers with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tcam::error::{Error, ErrorCategory};
use tcam::image::{Image, Mask};
use tcam::model::{Backbone, BackboneConfig, Class};
use tcam::synthdata::{generate, SceneSpec, VideoDataset};
use tcam::tensor::{load_checkpoint, save_checkpoint, Tensor};
use tcam::temporal::{cam_map, warp_map, FlowField, SaliencyMap};
use tcam::train::{fit, RunConfig};

/// Result of every call. Nonzero values match the CLI's exit codes where
/// they overlap.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcamStatus {
    Ok = 0,
    ConfigError = 2,
    IoError = 3,
    ContractError = 4,
    NumericError = 5,
    NullPointer = 6,
    InvalidArgument = 7,
    Panic = 8,
}

/// Trained or freshly initialized backbone.
pub struct TcamBackbone {
    inner: Backbone<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Core(Error),
    Null(&'static str),
    Invalid(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type FfiResult = Result<(), Failure>;

fn guard(f: impl FnOnce() -> FfiResult) -> TcamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TcamStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            match e.category() {
                ErrorCategory::Config => TcamStatus::ConfigError,
                ErrorCategory::Io => TcamStatus::IoError,
                ErrorCategory::Contract => TcamStatus::ContractError,
                ErrorCategory::Numeric => TcamStatus::NumericError,
            }
        }
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("argument `{name}` is null"));
            TcamStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            TcamStatus::InvalidArgument
        }
        Err(_) => {
            set_error("internal panic".into());
            TcamStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(name))
    } else {
        Ok(p)
    }
}

unsafe fn path_arg(p: *const c_char, name: &'static str) -> Result<PathBuf, Failure> {
    let s = CStr::from_ptr(non_null(p, name)?)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("argument `{name}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn backbone_ref<'a>(b: *const TcamBackbone) -> Result<&'a Backbone<f32>, Failure> {
    Ok(&(*non_null(b, "backbone")?).inner)
}

unsafe fn image_arg(rgb: *const f32, height: usize, width: usize) -> Result<Image, Failure> {
    let n = 3 * height * width;
    let data = std::slice::from_raw_parts(non_null(rgb, "rgb")?, n).to_vec();
    Ok(Image::new(3, height, width, data)?)
}

fn class_arg(class: u32) -> Result<Class, Failure> {
    Class::from_index(class as usize).ok_or_else(|| Failure::Invalid(format!("class index {class} is not 0, 1 or 2")))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tcam_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn tcam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// New backbone with the default architecture, initialized from `seed`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn tcam_backbone_new(seed: u64, out: *mut *mut TcamBackbone) -> TcamStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = Backbone::new(BackboneConfig::default(), seed)?;
        *out = Box::into_raw(Box::new(TcamBackbone { inner }));
        Ok(())
    })
}

/// Loads a default-architecture backbone from a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcam_backbone_load(path: *const c_char, out: *mut *mut TcamBackbone) -> TcamStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = path_arg(path, "path")?;
        let inner = Backbone::from_named(BackboneConfig::default(), load_checkpoint(&path)?)?;
        *out = Box::into_raw(Box::new(TcamBackbone { inner }));
        Ok(())
    })
}

/// Writes the backbone's parameters to a checkpoint file.
///
/// # Safety
/// `backbone` must come from this library; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn tcam_backbone_save(backbone: *const TcamBackbone, path: *const c_char) -> TcamStatus {
    guard(|| {
        let b = backbone_ref(backbone)?;
        save_checkpoint(&path_arg(path, "path")?, b.params())?;
        Ok(())
    })
}

/// Releases a backbone. Null is ignored.
///
/// # Safety
/// `backbone` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tcam_backbone_free(backbone: *mut TcamBackbone) {
    if !backbone.is_null() {
        drop(Box::from_raw(backbone));
    }
}

/// Total stride `s` of the backbone: feature maps are `H/s × W/s`.
///
/// # Safety
/// `backbone` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn tcam_backbone_stride(backbone: *const TcamBackbone) -> usize {
    backbone.as_ref().map_or(0, |b| b.inner.stride())
}

/// Class probabilities `σ(GAP(f))` of one image into `out_scores[3]`
/// (before, after, background).
///
/// # Safety
/// `rgb` must hold `3·height·width` floats and `out_scores` room for 3.
#[no_mangle]
pub unsafe extern "C" fn tcam_predict(
    backbone: *const TcamBackbone,
    rgb: *const f32,
    height: usize,
    width: usize,
    out_scores: *mut f32,
) -> TcamStatus {
    guard(|| {
        let b = backbone_ref(backbone)?;
        non_null(out_scores, "out_scores")?;
        let f = b.features_of(&image_arg(rgb, height, width)?.to_tensor())?;
        let (_, c, h, w) = f.dims4()?;
        let out = std::slice::from_raw_parts_mut(out_scores, c);
        for (k, o) in out.iter_mut().enumerate() {
            let mean = f.data()[k * h * w..(k + 1) * h * w].iter().sum::<f32>() / (h * w) as f32;
            *o = 1.0 / (1.0 + (-mean).exp());
        }
        Ok(())
    })
}

/// Normalized class activation map of `class` for one image, written to
/// `out_map` (`(height/s)·(width/s)` floats, row-major).
///
/// # Safety
/// `rgb` must hold `3·height·width` floats; `out_map` must hold `out_len`.
#[no_mangle]
pub unsafe extern "C" fn tcam_cam(
    backbone: *const TcamBackbone,
    rgb: *const f32,
    height: usize,
    width: usize,
    class: u32,
    out_map: *mut f32,
    out_len: usize,
) -> TcamStatus {
    guard(|| {
        let b = backbone_ref(backbone)?;
        non_null(out_map, "out_map")?;
        let class = class_arg(class)?;
        let f = b.features_of(&image_arg(rgb, height, width)?.to_tensor())?;
        let m = cam_map(&f, class, 0)?;
        let values = m.values().data();
        if out_len != values.len() {
            return Err(Failure::Invalid(format!("out_len is {out_len}, map has {} values", values.len())));
        }
        std::slice::from_raw_parts_mut(out_map, out_len).copy_from_slice(values);
        Ok(())
    })
}

/// Backward bilinear warp of an `height × width` map in `[0, 1]`:
/// `out(p) = map(p + (dx, dy)(p))`, zero outside the grid.
///
/// # Safety
/// `map`, `dx`, `dy` and `out` must each hold `height·width` floats.
#[no_mangle]
pub unsafe extern "C" fn tcam_warp(
    map: *const f32,
    dx: *const f32,
    dy: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
) -> TcamStatus {
    guard(|| {
        let n = height * width;
        let slice = |p: *const f32, name| -> Result<Vec<f32>, Failure> {
            Ok(std::slice::from_raw_parts(non_null(p, name)?, n).to_vec())
        };
        non_null(out, "out")?;
        let m = SaliencyMap::new(Tensor::new(&[height, width], slice(map, "map")?)?, Class::Before, 0)?;
        let flow = FlowField::new(height, width, slice(dx, "dx")?, slice(dy, "dy")?)?;
        let w = warp_map(&m, &flow, 0)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(w.values().data());
        Ok(())
    })
}

/// Mean per-image IoU of `count` binary masks (nonzero = set), each
/// `height × width`, stored back to back.
///
/// # Safety
/// `pred` and `gt` must each hold `count·height·width` bytes.
#[no_mangle]
pub unsafe extern "C" fn tcam_miou(
    pred: *const u8,
    gt: *const u8,
    count: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> TcamStatus {
    guard(|| {
        non_null(out, "out")?;
        let n = height * width;
        let masks = |p: *const u8, name| -> Result<Vec<Mask>, Failure> {
            let all = std::slice::from_raw_parts(non_null(p, name)?, count * n);
            all.chunks(n.max(1))
                .take(count)
                .map(|c| Mask::new(height, width, c.iter().map(|&v| v != 0).collect()).map_err(Failure::from))
                .collect()
        };
        *out = tcam::eval::miou(&masks(pred, "pred")?, &masks(gt, "gt")?)?;
        Ok(())
    })
}

/// Per-pixel grayscale median of `count` RGB frames into `out_gray`
/// (`height·width` floats).
///
/// # Safety
/// `frames` must hold `count·3·height·width` floats, `out_gray` `height·width`.
#[no_mangle]
pub unsafe extern "C" fn tcam_estimate_background(
    frames: *const f32,
    count: usize,
    height: usize,
    width: usize,
    out_gray: *mut f32,
) -> TcamStatus {
    guard(|| {
        non_null(out_gray, "out_gray")?;
        let per = 3 * height * width;
        let data = std::slice::from_raw_parts(non_null(frames, "frames")?, count * per);
        let imgs = data
            .chunks(per.max(1))
            .take(count)
            .map(|c| Image::new(3, height, width, c.to_vec()))
            .collect::<tcam::Result<Vec<_>>>()?;
        let bg = tcam::preprocess::estimate_background(&imgs)?;
        std::slice::from_raw_parts_mut(out_gray, height * width).copy_from_slice(bg.data());
        Ok(())
    })
}

/// Generates a default synthetic before/after dataset into `out_dir`.
///
/// # Safety
/// `out_dir` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tcam_generate(out_dir: *const c_char, n_before: usize, n_after: usize, seed: u64) -> TcamStatus {
    guard(|| {
        let dir = path_arg(out_dir, "out_dir")?;
        let spec = SceneSpec {
            seed,
            ..SceneSpec::default()
        };
        generate(&spec, n_before, n_after)?.save(&dir)?;
        Ok(())
    })
}

/// Trains on the dataset in `train_dir` (validated on `val_dir`, which may
/// be null) and writes config, metrics and checkpoint into `out_dir`.
/// `config_path` may be null for the defaults. On success `*out` receives
/// the trained backbone if `out` is not null.
///
/// # Safety
/// String arguments must be nul-terminated or null where allowed.
#[no_mangle]
pub unsafe extern "C" fn tcam_train(
    train_dir: *const c_char,
    val_dir: *const c_char,
    out_dir: *const c_char,
    config_path: *const c_char,
    out: *mut *mut TcamBackbone,
) -> TcamStatus {
    guard(|| {
        let train = VideoDataset::load(&path_arg(train_dir, "train_dir")?)?;
        let val = if val_dir.is_null() {
            None
        } else {
            Some(VideoDataset::load(&path_arg(val_dir, "val_dir")?)?)
        };
        let cfg = if config_path.is_null() {
            RunConfig::default()
        } else {
            RunConfig::load(&path_arg(config_path, "config_path")?)?
        };
        let outcome = fit(&train, val.as_ref(), &cfg, Some(&path_arg(out_dir, "out_dir")?))?;
        if !out.is_null() {
            *out = Box::into_raw(Box::new(TcamBackbone {
                inner: outcome.backbone,
            }));
        }
        Ok(())
    })
}
