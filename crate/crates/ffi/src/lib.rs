//! C interface to world generation, training, prediction and evaluation.
//!
//! Every function returns a [`VpStatus`]. On failure the message is available
//! from [`vp_last_error`] on the same thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use vpcmjl::data::{load_world, read_checkpoint_header, save_world, Checkpoint, Mode, SplitTag, World};
use vpcmjl::encoders::{generate_world, SyntheticWorldConfig};
use vpcmjl::eval::{evaluate, predict, Fusion};
use vpcmjl::model::Model;
use vpcmjl::tensor::{DType, Element, Tensor};
use vpcmjl::train::{model_from_checkpoint, Trainer};
use vpcmjl::{Config, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VpStatus {
    Ok = 0,
    Config = 1,
    Contract = 2,
    Divergence = 3,
    Io = 4,
    Format = 5,
    Shape = 6,
    NullArgument = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VpMode {
    Closed = 0,
    Open = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VpSplit {
    Train = 0,
    Val = 1,
    Test = 2,
}

/// Opaque synthetic world.
pub struct VpWorld(World);

enum Inner {
    F32(Model<f32>),
    F64(Model<f64>),
}

/// Opaque trained model.
pub struct VpModel(Inner);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct VpWorldCounts {
    pub n_attrs: usize,
    pub n_objs: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub raw_dim: usize,
}

/// Accuracies as fractions in `[0, 1]`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct VpMetrics {
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
    pub auc: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> VpStatus {
    match e {
        Error::Config(_) => VpStatus::Config,
        Error::Divergence(_) => VpStatus::Divergence,
        Error::Io { .. } => VpStatus::Io,
        Error::Format(_) | Error::Json(_) => VpStatus::Format,
        Error::Shape(_) => VpStatus::Shape,
        _ => VpStatus::Contract,
    }
}

struct Fail(VpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VpStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VpStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            VpStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(VpStatus::NullArgument, format!("{what} is null"))
}

unsafe fn opt_str<'a>(p: *const c_char) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| Fail(VpStatus::Format, "string argument is not UTF-8".into()))
}

unsafe fn req_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    opt_str(p)?.ok_or_else(|| null(what))
}

unsafe fn req_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn mode_of(m: VpMode) -> Mode {
    match m {
        VpMode::Closed => Mode::Closed,
        VpMode::Open => Mode::Open,
    }
}

fn fusion_of(lambda: f64) -> Result<Fusion, Fail> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(Fusion::Joint { lambda })
    } else {
        Err(Fail(VpStatus::Config, format!("lambda must be finite and >= 0, got {lambda}")))
    }
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn vp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Generate a world from a JSON world config (null for defaults).
///
/// # Safety
/// `config_json` must be null or a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vp_world_generate(config_json: *const c_char, out: *mut *mut VpWorld) -> VpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: SyntheticWorldConfig = match opt_str(config_json)? {
            Some(s) => serde_json::from_str(s).map_err(|e| Fail(VpStatus::Config, e.to_string()))?,
            None => SyntheticWorldConfig::default(),
        };
        let (world, _) = generate_world(&cfg)?;
        *out = Box::into_raw(Box::new(VpWorld(world)));
        Ok(())
    })
}

/// # Safety
/// `dir` must be a nul-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vp_world_load(dir: *const c_char, out: *mut *mut VpWorld) -> VpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let world = load_world(&PathBuf::from(req_str(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(VpWorld(world)));
        Ok(())
    })
}

/// # Safety
/// `world` must come from this library; `dir` must be a nul-terminated path.
#[no_mangle]
pub unsafe extern "C" fn vp_world_save(world: *const VpWorld, dir: *const c_char) -> VpStatus {
    guard(|| {
        let w = req_ref(world, "world")?;
        let dir = PathBuf::from(req_str(dir, "dir")?);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_world(&dir, &w.0)?;
        Ok(())
    })
}

/// # Safety
/// `world` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vp_world_counts(world: *const VpWorld, out: *mut VpWorldCounts) -> VpStatus {
    guard(|| {
        let w = &req_ref(world, "world")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = VpWorldCounts {
            n_attrs: w.space.n_attrs(),
            n_objs: w.space.n_objs(),
            n_seen: w.space.seen().len(),
            n_unseen: w.space.unseen().len(),
            n_train: w.train.len(),
            n_val: w.val.len(),
            n_test: w.test.len(),
            raw_dim: w.raw_dim(),
        };
        Ok(())
    })
}

/// # Safety
/// `world` must be null or a pointer from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vp_world_free(world: *mut VpWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

fn train_typed<T: Element>(cfg: &Config, world: &World, out_dir: Option<&str>) -> Result<Model<T>, Fail> {
    let mut tr = Trainer::<T>::new(cfg, world)?;
    tr.run(|_| {})?;
    if let Some(dir) = out_dir {
        let dir = PathBuf::from(dir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        tr.checkpoint().save(&dir.join("final.ckpt"))?;
        tr.best_checkpoint().save(&dir.join("best.ckpt"))?;
        tr.log().write_csv(&dir.join("train_log.csv"))?;
    }
    Ok(tr.best_model()?)
}

/// Train on `world` with a TOML config (null for defaults) and return the
/// best-validation model. If `out_dir` is non-null, checkpoints and the epoch
/// log are written there.
///
/// # Safety
/// String arguments must be null or nul-terminated; `world` valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vp_train(
    world: *const VpWorld,
    config_toml: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut VpModel,
) -> VpStatus {
    guard(|| {
        let w = &req_ref(world, "world")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = match opt_str(config_toml)? {
            Some(s) => Config::from_toml_str(s)?,
            None => Config::default(),
        };
        let dir = opt_str(out_dir)?;
        let model = match cfg.dtype {
            DType::F32 => Inner::F32(train_typed(&cfg, w, dir)?),
            DType::F64 => Inner::F64(train_typed(&cfg, w, dir)?),
        };
        *out = Box::into_raw(Box::new(VpModel(model)));
        Ok(())
    })
}

/// Load a checkpoint for use with `world`.
///
/// # Safety
/// `world` valid; `path` nul-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vp_model_load(world: *const VpWorld, path: *const c_char, out: *mut *mut VpModel) -> VpStatus {
    guard(|| {
        let w = &req_ref(world, "world")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(req_str(path, "path")?);
        let model = match read_checkpoint_header(&path)?.dtype {
            DType::F32 => Inner::F32(model_from_checkpoint(&Checkpoint::load(&path)?, w)?),
            DType::F64 => Inner::F64(model_from_checkpoint(&Checkpoint::load(&path)?, w)?),
        };
        *out = Box::into_raw(Box::new(VpModel(model)));
        Ok(())
    })
}

fn predict_typed<T: Element>(
    m: &Model<T>,
    raw: &[f32],
    n: usize,
    raw_dim: usize,
    mode: Mode,
    fusion: Fusion,
) -> Result<Vec<(usize, usize)>, Fail> {
    let t: Tensor<f32> = Tensor::new(vec![n, raw_dim], raw.to_vec())?;
    let preds = predict(m, &t.cast::<T>(), mode, fusion)?;
    Ok(preds.into_iter().map(|p| (p.0, p.1)).collect())
}

/// Predict the composition of `n` raw feature rows (row-major, `raw_dim` wide).
/// Writes attribute and object indices to `out_attr[n]` and `out_obj[n]`.
///
/// # Safety
/// `raw` must hold `n * raw_dim` floats; output arrays must hold `n` entries.
#[no_mangle]
pub unsafe extern "C" fn vp_model_predict(
    model: *const VpModel,
    raw: *const f32,
    n: usize,
    raw_dim: usize,
    mode: VpMode,
    lambda: f64,
    out_attr: *mut usize,
    out_obj: *mut usize,
) -> VpStatus {
    guard(|| {
        let m = req_ref(model, "model")?;
        if raw.is_null() || out_attr.is_null() || out_obj.is_null() {
            return Err(null("raw or output buffer"));
        }
        if n == 0 {
            return Ok(());
        }
        let len = n
            .checked_mul(raw_dim)
            .ok_or_else(|| Fail(VpStatus::Shape, "n * raw_dim overflows".into()))?;
        let raw = std::slice::from_raw_parts(raw, len);
        let fusion = fusion_of(lambda)?;
        let preds = match &m.0 {
            Inner::F32(m) => predict_typed(m, raw, n, raw_dim, mode_of(mode), fusion)?,
            Inner::F64(m) => predict_typed(m, raw, n, raw_dim, mode_of(mode), fusion)?,
        };
        for (k, (a, o)) in preds.into_iter().enumerate() {
            *out_attr.add(k) = a;
            *out_obj.add(k) = o;
        }
        Ok(())
    })
}

/// Score one split of `world` with the calibration-bias sweep.
///
/// # Safety
/// Pointers must be valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vp_model_evaluate(
    model: *const VpModel,
    world: *const VpWorld,
    split: VpSplit,
    mode: VpMode,
    lambda: f64,
    out: *mut VpMetrics,
) -> VpStatus {
    guard(|| {
        let m = req_ref(model, "model")?;
        let w = &req_ref(world, "world")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let tag = match split {
            VpSplit::Train => SplitTag::Train,
            VpSplit::Val => SplitTag::Val,
            VpSplit::Test => SplitTag::Test,
        };
        let fusion = fusion_of(lambda)?;
        let r = match &m.0 {
            Inner::F32(m) => evaluate(m, w.split(tag), mode_of(mode), fusion, 0)?,
            Inner::F64(m) => evaluate(m, w.split(tag), mode_of(mode), fusion, 0)?,
        };
        *out = VpMetrics {
            seen: r.seen,
            unseen: r.unseen,
            hm: r.hm,
            auc: r.auc,
        };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a pointer from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vp_model_free(model: *mut VpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
