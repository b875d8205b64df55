//! C ABI over the gpoolnet model.
//!
//! Models live behind the opaque [`GpnModel`] handle. Every function returns
//! a [`GpnStatus`]; on failure, [`gpn_last_error`] describes the most recent
//! error on the calling thread. Matrices are dense, row-major `double`
//! buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use gpoolnet::autodiff::Tape;
use gpoolnet::checkpoint::Checkpoint;
use gpoolnet::graph::Adjacency;
use gpoolnet::layers::gpool_forward;
use gpoolnet::model::{build, infer, param_count};
use gpoolnet::text2graph::{PosTag, Token};
use gpoolnet::{Arch, Error, ModelParams, ModelSpec, Tensor, TextGraph};

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GpnStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Invalid architecture, widths or other settings.
    Config = 2,
    /// Buffer sizes or matrix shapes do not agree.
    Shape = 3,
    /// A file could not be parsed.
    Format = 4,
    Io = 5,
    /// Any other failure inside the library.
    Runtime = 6,
    /// The library panicked; the handle should be discarded.
    Panic = 7,
}

/// Opaque model handle.
pub struct GpnModel {
    spec: ModelSpec,
    params: ModelParams<f64>,
    max_nodes: Option<usize>,
    seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> GpnStatus {
    match e {
        Error::Config(_) => GpnStatus::Config,
        Error::Shape(_) | Error::Index(_) => GpnStatus::Shape,
        Error::Format { .. } | Error::Json(_) => GpnStatus::Format,
        Error::Io { .. } => GpnStatus::Io,
        _ => GpnStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (GpnStatus, String)>) -> GpnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GpnStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GpnStatus::Panic
        }
    }
}

fn lib(e: Error) -> (GpnStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (GpnStatus, String) {
    (GpnStatus::NullArgument, format!("`{name}` is null"))
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, (GpnStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (GpnStatus::Config, format!("`{name}` is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], (GpnStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(
    p: *mut T,
    len: usize,
    name: &str,
) -> Result<&'a mut [T], (GpnStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn model_ref<'a>(m: *const GpnModel) -> Result<&'a GpnModel, (GpnStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gpn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn gpn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a freshly initialized model.
///
/// `arch` is one of `gcn_net`, `gcn_gpool_net`, `hconv_net`,
/// `hconv_gpool_net`; `channels` points to 4 layer widths.
///
/// # Safety
/// `arch` must be a NUL-terminated string, `channels` must hold 4 values and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gpn_model_build(
    arch: *const c_char,
    channels: *const usize,
    input_dim: usize,
    n_classes: usize,
    seed: u64,
    out: *mut *mut GpnModel,
) -> GpnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let arch: Arch = c_str(arch, "arch")?.parse().map_err(lib)?;
        let channels = slice(channels, 4, "channels")?;
        let spec = ModelSpec::new(arch, input_dim, n_classes).with_channels(channels);
        let params = build(&spec, seed).map_err(lib)?;
        *out = Box::into_raw(Box::new(GpnModel {
            spec,
            params,
            max_nodes: None,
            seed,
        }));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gpn_model_load(path: *const c_char, out: *mut *mut GpnModel) -> GpnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(c_str(path, "path")?);
        let ck = Checkpoint::load(path).map_err(lib)?;
        *out = Box::into_raw(Box::new(GpnModel {
            params: ck.params_as(),
            spec: ck.spec,
            max_nodes: ck.max_nodes,
            seed: ck.seed,
        }));
        Ok(())
    })
}

/// Writes the model as a checkpoint file without optimizer state.
///
/// # Safety
/// `model` must come from this library and `path` must be a NUL-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn gpn_model_save(model: *const GpnModel, path: *const c_char) -> GpnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = PathBuf::from(c_str(path, "path")?);
        let mut ck = Checkpoint::from_params(&m.spec, &m.params, m.seed);
        ck.max_nodes = m.max_nodes;
        ck.save(path).map_err(lib)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gpn_model_free(model: *mut GpnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature width each node row must have.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gpn_model_input_dim(model: *const GpnModel, out: *mut usize) -> GpnStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.spec.input_dim;
        Ok(())
    })
}

/// Number of output classes.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gpn_model_num_classes(model: *const GpnModel, out: *mut usize) -> GpnStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.spec.n_classes;
        Ok(())
    })
}

/// Total scalar parameters and the share held by gPool projections.
///
/// # Safety
/// `model` must come from this library; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gpn_model_param_count(
    model: *const GpnModel,
    total: *mut usize,
    gpool_overhead: *mut usize,
) -> GpnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let counts = param_count(&m.params);
        *total.as_mut().ok_or_else(|| null("total"))? = counts.total;
        *gpool_overhead.as_mut().ok_or_else(|| null("gpool_overhead"))? = counts.gpool_overhead;
        Ok(())
    })
}

/// Inference on one graph of `n` nodes.
///
/// `adjacency` is `n x n`, symmetric and nonnegative; `features` is
/// `n x input_dim`; `logits` receives `n_classes` values.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn gpn_model_forward(
    model: *const GpnModel,
    n: usize,
    adjacency: *const f64,
    features: *const f64,
    logits: *mut f64,
    logits_len: usize,
) -> GpnStatus {
    guard(|| {
        let m = model_ref(model)?;
        if logits_len != m.spec.n_classes {
            return Err((
                GpnStatus::Shape,
                format!("logits holds {logits_len} values, model has {} classes", m.spec.n_classes),
            ));
        }
        let adj = slice(adjacency, n * n, "adjacency")?;
        let feat = slice(features, n * m.spec.input_dim, "features")?;
        let out = slice_mut(logits, logits_len, "logits")?;
        let nodes = (0..n)
            .map(|i| Token {
                surface: String::new(),
                text_pos: i,
                tag: PosTag::Other,
            })
            .collect();
        let graph = TextGraph::new(
            nodes,
            Adjacency::new(n, adj.to_vec()).map_err(lib)?,
            Tensor::from_vec(n, m.spec.input_dim, feat.to_vec()).map_err(lib)?,
            0,
            n,
        )
        .map_err(lib)?;
        let values = infer(&m.params, &m.spec, &graph).map_err(lib)?;
        out.copy_from_slice(&values);
        Ok(())
    })
}

/// A single top-k pooling step.
///
/// Scores the `n` rows of `features` (`n x c`) against `projection`
/// (length `c`), keeps the `k` best in their original order and writes the
/// kept indices (`k`), the induced adjacency (`k x k`) and the pooled,
/// optionally `tanh`-gated, features (`k x c`).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn gpn_gpool(
    n: usize,
    c: usize,
    adjacency: *const f64,
    features: *const f64,
    projection: *const f64,
    k: usize,
    gate: bool,
    out_idx: *mut usize,
    out_adjacency: *mut f64,
    out_features: *mut f64,
) -> GpnStatus {
    guard(|| {
        let adj = Adjacency::new(n, slice(adjacency, n * n, "adjacency")?.to_vec()).map_err(lib)?;
        let x = Tensor::from_vec(n, c, slice(features, n * c, "features")?.to_vec()).map_err(lib)?;
        let p = Tensor::from_vec(c, 1, slice(projection, c, "projection")?.to_vec()).map_err(lib)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pv = tape.constant(p);
        let pooled = gpool_forward(&mut tape, &adj, xv, pv, k, &vec![true; n], gate).map_err(lib)?;
        slice_mut(out_idx, k, "out_idx")?.copy_from_slice(&pooled.idx);
        slice_mut(out_adjacency, k * k, "out_adjacency")?.copy_from_slice(pooled.adjacency.as_slice());
        slice_mut(out_features, k * c, "out_features")?
            .copy_from_slice(tape.value(pooled.features).as_slice());
        Ok(())
    })
}
