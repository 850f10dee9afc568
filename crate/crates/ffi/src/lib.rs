//! C ABI over the `cavit` crate.
//!
//! Models live behind an opaque `CavitModel` handle. Every fallible call returns a
//! [`CavitStatus`]; on failure the message is kept per thread and can be read with
//! [`cavit_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cavit::cost::{cost_report, FlopOptions};
use cavit::model::checkpoint::{load_checkpoint, save_checkpoint};
use cavit::model::{ClsProjection, Model, ModelConfig, Variant};
use cavit::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CavitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Format = 5,
    Io = 6,
    BufferTooSmall = 7,
    Runtime = 8,
    Panic = 9,
}

/// Values accepted in `CavitConfig::variant`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CavitVariant {
    BaselineVit = 0,
    Cavit = 1,
    ChannelMhsa = 2,
    ChannelOnly = 3,
    ClsSwapped = 4,
}

/// Values accepted in `CavitConfig::cls_projection`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CavitClsProjection {
    Identity = 0,
    LearnedLinear = 1,
}

/// Model hyperparameters. `variant` and `cls_projection` hold `CavitVariant` and
/// `CavitClsProjection` values; they are plain integers so that any value coming
/// from C can be validated.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CavitConfig {
    pub variant: u32,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub spatial_heads: usize,
    pub channel_heads: usize,
    pub mlp_ratio: f64,
    pub n_classes: usize,
    pub in_channels: usize,
    pub cls_projection: u32,
}

/// Opaque model handle (32-bit weights).
pub struct CavitModel {
    model: Model<f32>,
}

const VARIANTS: [Variant; 5] = Variant::ALL;

impl From<&ModelConfig> for CavitConfig {
    fn from(c: &ModelConfig) -> Self {
        CavitConfig {
            variant: VARIANTS.iter().position(|&v| v == c.variant).expect("listed") as u32,
            image_size: c.image_size,
            patch_size: c.patch_size,
            embed_dim: c.embed_dim,
            depth: c.depth,
            spatial_heads: c.spatial_heads,
            channel_heads: c.channel_heads,
            mlp_ratio: c.mlp_ratio,
            n_classes: c.n_classes,
            in_channels: c.in_channels,
            cls_projection: match c.cls_projection {
                ClsProjection::Identity => CavitClsProjection::Identity as u32,
                ClsProjection::LearnedLinear => CavitClsProjection::LearnedLinear as u32,
            },
        }
    }
}

impl CavitConfig {
    fn to_model(self) -> Result<ModelConfig, Failure> {
        let variant = *VARIANTS
            .get(self.variant as usize)
            .ok_or_else(|| Failure::new(CavitStatus::InvalidArgument, format!("unknown variant {}", self.variant)))?;
        let cls_projection = match self.cls_projection {
            0 => ClsProjection::Identity,
            1 => ClsProjection::LearnedLinear,
            v => return Err(Failure::new(CavitStatus::InvalidArgument, format!("unknown cls_projection {v}"))),
        };
        let cfg = ModelConfig {
            variant,
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            spatial_heads: self.spatial_heads,
            channel_heads: self.channel_heads,
            mlp_ratio: self.mlp_ratio,
            n_classes: self.n_classes,
            in_channels: self.in_channels,
            cls_projection,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Failure {
    status: CavitStatus,
    message: String,
}

impl Failure {
    fn new(status: CavitStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }

    fn null(what: &str) -> Self {
        Failure::new(CavitStatus::NullPointer, format!("{what} is null"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension { .. } | Error::Rank { .. } | Error::Index { .. } => CavitStatus::Shape,
            Error::Config(_) | Error::Capability(_) => CavitStatus::Config,
            Error::Contract(_) => CavitStatus::InvalidArgument,
            Error::Format(_) => CavitStatus::Format,
            Error::Io { .. } => CavitStatus::Io,
            _ => CavitStatus::Runtime,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CavitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CavitStatus::Ok
        }
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            CavitStatus::Panic
        }
    }
}

unsafe fn config_arg(config: *const CavitConfig) -> Result<ModelConfig, Failure> {
    match config.as_ref() {
        Some(c) => c.to_model(),
        None => Err(Failure::null("config")),
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(Failure::null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Failure::new(CavitStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_arg<'a>(model: *const CavitModel) -> Result<&'a CavitModel, Failure> {
    model.as_ref().ok_or_else(|| Failure::null("model"))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null("output pointer"));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or NULL after a success. The
/// pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cavit_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cavit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Write the 32x32 desk preset to `out`.
///
/// # Safety
/// `out` must be NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cavit_config_desk(out: *mut CavitConfig) -> CavitStatus {
    guard(|| write_out(out, CavitConfig::from(&ModelConfig::desk())))
}

/// Write the 224x224 tiny-ViT preset to `out`.
///
/// # Safety
/// `out` must be NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cavit_config_paper(out: *mut CavitConfig) -> CavitStatus {
    guard(|| write_out(out, CavitConfig::from(&ModelConfig::paper())))
}

/// Create a model with freshly initialized weights.
///
/// # Safety
/// `config` must be NULL or point to a `CavitConfig`; `out` must be NULL or valid
/// for writes. On success `*out` owns a handle to release with `cavit_model_free`.
#[no_mangle]
pub unsafe extern "C" fn cavit_model_new(config: *const CavitConfig, seed: u64, out: *mut *mut CavitModel) -> CavitStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("output pointer"));
        }
        let cfg = config_arg(config)?;
        let model = Model::<f32>::new(cfg, seed)?;
        out.write(Box::into_raw(Box::new(CavitModel { model })));
        Ok(())
    })
}

/// Create a model of `config` and fill it from a checkpoint file.
///
/// # Safety
/// As `cavit_model_new`; `path` must be NULL or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cavit_model_load(
    config: *const CavitConfig,
    path: *const c_char,
    out: *mut *mut CavitModel,
) -> CavitStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("output pointer"));
        }
        let cfg = config_arg(config)?;
        let path = path_arg(path)?;
        let mut model = Model::<f32>::new(cfg, 0)?;
        load_checkpoint(model.params_mut(), &path)?;
        out.write(Box::into_raw(Box::new(CavitModel { model })));
        Ok(())
    })
}

/// Write the model's weights as a checkpoint file.
///
/// # Safety
/// `model` must be NULL or a live handle; `path` NULL or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cavit_model_save(model: *const CavitModel, path: *const c_char) -> CavitStatus {
    guard(|| {
        let m = model_arg(model)?;
        let path = path_arg(path)?;
        save_checkpoint(m.model.params(), &path)?;
        Ok(())
    })
}

/// Copy the model's configuration to `out`.
///
/// # Safety
/// `model` must be NULL or a live handle; `out` NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cavit_model_config(model: *const CavitModel, out: *mut CavitConfig) -> CavitStatus {
    guard(|| {
        let m = model_arg(model)?;
        write_out(out, CavitConfig::from(m.model.config()))
    })
}

/// Logits for `batch` images laid out `[batch, in_channels, image_size, image_size]`
/// row-major, written to `logits` as `[batch, n_classes]`.
///
/// # Safety
/// `images` must hold `batch * in_channels * image_size^2` floats and `logits`
/// `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn cavit_model_forward(
    model: *const CavitModel,
    images: *const f32,
    batch: usize,
    logits: *mut f32,
    logits_len: usize,
) -> CavitStatus {
    guard(|| {
        let m = model_arg(model)?;
        if images.is_null() {
            return Err(Failure::null("images"));
        }
        if logits.is_null() {
            return Err(Failure::null("logits"));
        }
        if batch == 0 {
            return Err(Failure::new(CavitStatus::InvalidArgument, "batch must be positive"));
        }
        let cfg = m.model.config();
        let need = batch * cfg.n_classes;
        if logits_len < need {
            return Err(Failure::new(
                CavitStatus::BufferTooSmall,
                format!("logits buffer holds {logits_len} floats, {need} needed"),
            ));
        }
        let n = batch * cfg.in_channels * cfg.image_size * cfg.image_size;
        let data = std::slice::from_raw_parts(images, n).to_vec();
        let x = Tensor::new([batch, cfg.in_channels, cfg.image_size, cfg.image_size], data)?;
        let y = m.model.logits(&x)?;
        std::slice::from_raw_parts_mut(logits, need).copy_from_slice(y.data());
        Ok(())
    })
}

/// Number of trainable scalars held by the model.
///
/// # Safety
/// `model` must be NULL or a live handle; `out` NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cavit_model_param_count(model: *const CavitModel, out: *mut u64) -> CavitStatus {
    guard(|| {
        let m = model_arg(model)?;
        write_out(out, m.model.params().num_scalars() as u64)
    })
}

/// Analytic parameter count of `config`.
///
/// # Safety
/// `config` must be NULL or point to a `CavitConfig`; `out` NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cavit_count_params(config: *const CavitConfig, out: *mut u64) -> CavitStatus {
    guard(|| {
        let cfg = config_arg(config)?;
        write_out(out, cost_report(&cfg, FlopOptions::default())?.total_params())
    })
}

/// Forward FLOPs (2 x multiply-accumulates) of one image under `config`.
///
/// # Safety
/// `config` must be NULL or point to a `CavitConfig`; `out` NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cavit_count_flops(
    config: *const CavitConfig,
    include_elementwise: bool,
    include_attention_matmuls: bool,
    out: *mut u64,
) -> CavitStatus {
    guard(|| {
        let cfg = config_arg(config)?;
        let opts = FlopOptions {
            include_elementwise,
            include_attention_matmuls,
        };
        write_out(out, cost_report(&cfg, opts)?.total_flops())
    })
}

/// Release a model handle. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cavit_model_free(model: *mut CavitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
