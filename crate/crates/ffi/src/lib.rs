//! C ABI over the tri-matrix adapter core.
//!
//! Conventions:
//!
//! * Every fallible function returns a [`TriloraStatus`]; `TRILORA_STATUS_OK`
//!   is zero. On failure a message is stored per thread and can be read with
//!   [`trilora_last_error`].
//! * Adapters and optimizer states are opaque handles created by `*_new` and
//!   released by the matching `*_free`. Passing NULL to a free function is a
//!   no-op.
//! * Matrices are dense row-major `double` buffers. Every buffer comes with
//!   its length in elements, which must equal `rows * cols` exactly.
//! * Activations are one example per column: `x` is `n x batch`, the upstream
//!   gradient `u` and the adapter output are `m x batch`.
//! * Strings returned by the library are NUL-terminated and must be released
//!   with [`trilora_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use trilora::checkpoint::{Checkpoint, Encoding};
use trilora::grad::adapter_grads;
use trilora::metrics::mcc;
use trilora::optim::{adamw_step, lr_ratios, signsgd_step};
use trilora::{
    AdapterSpec, Error, Factor, FactorRates, GradTriple, InitScheme, Matrix, OptimizerConfig, OptimizerState,
    RatioMode, TrainMode, TriAdapter,
};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriloraStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    RankTooLarge = 4,
    NonFinite = 5,
    Parse = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriloraMode {
    BOnly = 0,
    Ab = 1,
    Cb = 2,
    Abc = 3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriloraInit {
    /// `B = 0`, so a fresh adapter leaves the layer output unchanged.
    OutputPreserving = 0,
    LecunAll = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriloraRatioMode {
    Uniform = 0,
    /// Per-layer ratios from the layer shape.
    Eq7 = 1,
    /// Global ratio base.
    Eq8 = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriloraEncoding {
    Base64 = 0,
    Array = 1,
}

/// Shape and hyperparameters of an adapter.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriloraSpec {
    pub m: usize,
    pub n: usize,
    pub r1: usize,
    pub r2: usize,
    pub mode: TriloraMode,
    pub init: TriloraInit,
    pub seed: u64,
    pub scale: f64,
}

/// Learning rates for the three factors.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TriloraRates {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// AdamW hyperparameters. The learning rates come from [`TriloraRates`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriloraAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Read-only gradient buffers, `a` is `r2 x n`, `b` is `r1 x r2`, `c` is `m x r1`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TriloraGrads {
    pub a: *const f64,
    pub a_len: usize,
    pub b: *const f64,
    pub b_len: usize,
    pub c: *const f64,
    pub c_len: usize,
}

/// Writable gradient buffers with the same shapes as [`TriloraGrads`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TriloraGradsOut {
    pub a: *mut f64,
    pub a_len: usize,
    pub b: *mut f64,
    pub b_len: usize,
    pub c: *mut f64,
    pub c_len: usize,
}

/// Opaque tri-matrix adapter.
pub struct TriloraAdapter(TriAdapter);

/// Opaque AdamW state bound to one adapter's shapes.
pub struct TriloraAdamState(OptimizerState);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(TriloraStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::ShapeMismatch { .. } => TriloraStatus::ShapeMismatch,
            Error::RankTooLarge { .. } => TriloraStatus::RankTooLarge,
            Error::NonFinite(_) => TriloraStatus::NonFinite,
            Error::Json(_) => TriloraStatus::Parse,
            _ => TriloraStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(TriloraStatus::NullPointer, format!("{what} is NULL"))
}

/// Runs `f`, converting errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TriloraStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TriloraStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TriloraStatus::Panic
        }
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn read_matrix(p: *const f64, len: usize, rows: usize, cols: usize, what: &str) -> Result<Matrix, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    check_len(len, rows, cols, what)?;
    Ok(Matrix::from_vec(
        rows,
        cols,
        std::slice::from_raw_parts(p, len).to_vec(),
    )?)
}

unsafe fn write_matrix(m: &Matrix, p: *mut f64, len: usize, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    check_len(len, m.rows(), m.cols(), what)?;
    std::slice::from_raw_parts_mut(p, len).copy_from_slice(m.as_slice());
    Ok(())
}

fn check_len(len: usize, rows: usize, cols: usize, what: &str) -> Result<(), Failure> {
    if len != rows * cols {
        return Err(Failure(
            TriloraStatus::ShapeMismatch,
            format!("{what}: expected {rows} x {cols} = {} values, got {len}", rows * cols),
        ));
    }
    Ok(())
}

fn mode_from(m: TriloraMode) -> TrainMode {
    match m {
        TriloraMode::BOnly => TrainMode::BOnly,
        TriloraMode::Ab => TrainMode::Ab,
        TriloraMode::Cb => TrainMode::Cb,
        TriloraMode::Abc => TrainMode::Abc,
    }
}

fn mode_to(m: TrainMode) -> TriloraMode {
    match m {
        TrainMode::BOnly => TriloraMode::BOnly,
        TrainMode::Ab => TriloraMode::Ab,
        TrainMode::Cb => TriloraMode::Cb,
        TrainMode::Abc => TriloraMode::Abc,
    }
}

fn rates_from(r: TriloraRates) -> FactorRates {
    FactorRates { a: r.a, b: r.b, c: r.c }
}

unsafe fn read_grads(ad: &TriAdapter, g: &TriloraGrads) -> Result<GradTriple, Failure> {
    let s = ad.spec();
    Ok(GradTriple {
        a: read_matrix(g.a, g.a_len, s.r2, s.n, "grads.a")?,
        b: read_matrix(g.b, g.b_len, s.r1, s.r2, "grads.b")?,
        c: read_matrix(g.c, g.c_len, s.m, s.r1, "grads.c")?,
    })
}

fn alloc_string(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|e| Failure(TriloraStatus::InvalidArgument, e.to_string()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message for the most recent failure on this thread, or NULL if the last
/// call succeeded. Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn trilora_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates an adapter. `r1` must not exceed `m` and `r2` must not exceed `n`.
///
/// # Safety
/// `spec` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn trilora_adapter_new(spec: *const TriloraSpec, out: *mut *mut TriloraAdapter) -> TriloraStatus {
    guard(|| {
        let s = *handle(spec, "spec")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = AdapterSpec {
            m: s.m,
            n: s.n,
            r1: s.r1,
            r2: s.r2,
            mode: mode_from(s.mode),
            init: match s.init {
                TriloraInit::OutputPreserving => InitScheme::OutputPreserving,
                TriloraInit::LecunAll => InitScheme::LecunAll,
            },
            seed: s.seed,
            scale: s.scale,
        };
        *out = Box::into_raw(Box::new(TriloraAdapter(TriAdapter::init(spec)?)));
        Ok(())
    })
}

/// # Safety
/// `adapter` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn trilora_adapter_free(adapter: *mut TriloraAdapter) {
    if !adapter.is_null() {
        drop(Box::from_raw(adapter));
    }
}

/// Writes the adapter's spec to `out`.
///
/// # Safety
/// `adapter` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn trilora_adapter_spec(adapter: *const TriloraAdapter, out: *mut TriloraSpec) -> TriloraStatus {
    guard(|| {
        let s = handle(adapter, "adapter")?.0.spec();
        let out = handle_mut(out, "out")?;
        *out = TriloraSpec {
            m: s.m,
            n: s.n,
            r1: s.r1,
            r2: s.r2,
            mode: mode_to(s.mode),
            init: match s.init {
                InitScheme::OutputPreserving => TriloraInit::OutputPreserving,
                InitScheme::LecunAll => TriloraInit::LecunAll,
            },
            seed: s.seed,
            scale: s.scale,
        };
        Ok(())
    })
}

/// Copies the three factors into caller buffers (`a`: `r2 x n`, `b`:
/// `r1 x r2`, `c`: `m x r1`).
///
/// # Safety
/// `adapter` must be a live handle; each buffer must hold its stated length.
#[no_mangle]
pub unsafe extern "C" fn trilora_adapter_factors(
    adapter: *const TriloraAdapter,
    out: TriloraGradsOut,
) -> TriloraStatus {
    guard(|| {
        let ad = &handle(adapter, "adapter")?.0;
        write_matrix(ad.factor(Factor::A), out.a, out.a_len, "A")?;
        write_matrix(ad.factor(Factor::B), out.b, out.b_len, "B")?;
        write_matrix(ad.factor(Factor::C), out.c, out.c_len, "C")?;
        Ok(())
    })
}

/// Replaces the three factors, keeping the spec. Frozen factors are
/// overwritten too.
///
/// # Safety
/// `adapter` must be a live handle; each buffer must hold its stated length.
#[no_mangle]
pub unsafe extern "C" fn trilora_adapter_set_factors(
    adapter: *mut TriloraAdapter,
    factors: TriloraGrads,
) -> TriloraStatus {
    guard(|| {
        let h = handle_mut(adapter, "adapter")?;
        let g = read_grads(&h.0, &factors)?;
        h.0 = TriAdapter::from_parts(h.0.spec().clone(), g.a, g.b, g.c)?;
        Ok(())
    })
}

/// Adapter contribution `s·C·B·A·X` for `x` of shape `n x batch`, written to
/// `out` of shape `m x batch`.
///
/// # Safety
/// `adapter` must be a live handle; `x` and `out` must hold their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn trilora_adapter_forward(
    adapter: *const TriloraAdapter,
    x: *const f64,
    x_len: usize,
    batch: usize,
    out: *mut f64,
    out_len: usize,
) -> TriloraStatus {
    guard(|| {
        let ad = &handle(adapter, "adapter")?.0;
        let x = read_matrix(x, x_len, ad.spec().n, batch, "x")?;
        write_matrix(&ad.apply(&x)?, out, out_len, "out")
    })
}

/// Gradients of `L` with respect to `A`, `B` and `C` given the input `x`
/// (`n x batch`) and the upstream gradient `u = ∂L/∂Y` (`m x batch`).
///
/// # Safety
/// `adapter` must be a live handle; every buffer must hold its stated length.
#[no_mangle]
pub unsafe extern "C" fn trilora_adapter_grads(
    adapter: *const TriloraAdapter,
    x: *const f64,
    x_len: usize,
    u: *const f64,
    u_len: usize,
    batch: usize,
    out: TriloraGradsOut,
) -> TriloraStatus {
    guard(|| {
        let ad = &handle(adapter, "adapter")?.0;
        let s = ad.spec();
        let x = read_matrix(x, x_len, s.n, batch, "x")?;
        let u = read_matrix(u, u_len, s.m, batch, "u")?;
        let g = adapter_grads(ad, &x, &u)?;
        write_matrix(&g.a, out.a, out.a_len, "grads.a")?;
        write_matrix(&g.b, out.b, out.b_len, "grads.b")?;
        write_matrix(&g.c, out.c, out.c_len, "grads.c")?;
        Ok(())
    })
}

/// Per-factor rates for a layer of shape `m x n`. `ratio_base` is used only
/// by `TRILORA_RATIO_MODE_EQ8`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn trilora_lr_ratios(
    mode: TriloraRatioMode,
    base_lr: f64,
    ratio_base: f64,
    m: usize,
    n: usize,
    out: *mut TriloraRates,
) -> TriloraStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let cfg = OptimizerConfig {
            ratio_mode: match mode {
                TriloraRatioMode::Uniform => RatioMode::Uniform,
                TriloraRatioMode::Eq7 => RatioMode::Eq7,
                TriloraRatioMode::Eq8 => RatioMode::Eq8,
            },
            ratio_base,
            ..OptimizerConfig::new(base_lr)
        };
        cfg.validate()?;
        if m == 0 || n == 0 {
            return Err(Failure(
                TriloraStatus::InvalidArgument,
                "m and n must be positive".into(),
            ));
        }
        let r = lr_ratios(&cfg, m, n);
        *out = TriloraRates { a: r.a, b: r.b, c: r.c };
        Ok(())
    })
}

/// `X ← X − η_X·sign(G_X)` for every factor the adapter's mode trains.
/// Gradients of frozen factors are still shape-checked but otherwise ignored.
///
/// # Safety
/// `adapter` must be a live handle; gradient buffers must hold their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn trilora_signsgd_step(
    adapter: *mut TriloraAdapter,
    grads: TriloraGrads,
    rates: TriloraRates,
) -> TriloraStatus {
    guard(|| {
        let ad = &mut handle_mut(adapter, "adapter")?.0;
        let g = read_grads(ad, &grads)?;
        signsgd_step(ad, &g, rates_from(rates))?;
        Ok(())
    })
}

/// Fresh AdamW state (zero moments, step 0) matching `adapter`.
///
/// # Safety
/// `adapter` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn trilora_adam_state_new(
    adapter: *const TriloraAdapter,
    out: *mut *mut TriloraAdamState,
) -> TriloraStatus {
    guard(|| {
        let ad = &handle(adapter, "adapter")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(TriloraAdamState(OptimizerState::new(ad))));
        Ok(())
    })
}

/// # Safety
/// `state` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn trilora_adam_state_free(state: *mut TriloraAdamState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// Number of AdamW steps taken with `state`.
///
/// # Safety
/// `state` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn trilora_adam_state_step(state: *const TriloraAdamState) -> u64 {
    state.as_ref().map_or(0, |s| s.0.step)
}

/// One bias-corrected AdamW step with decoupled weight decay.
///
/// # Safety
/// `adapter` and `state` must be live handles and `config` a valid pointer;
/// gradient buffers must hold their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn trilora_adamw_step(
    adapter: *mut TriloraAdapter,
    state: *mut TriloraAdamState,
    grads: TriloraGrads,
    config: *const TriloraAdamConfig,
    rates: TriloraRates,
) -> TriloraStatus {
    guard(|| {
        let ad = &mut handle_mut(adapter, "adapter")?.0;
        let st = &mut handle_mut(state, "state")?.0;
        let c = *handle(config, "config")?;
        let cfg = OptimizerConfig {
            betas: [c.beta1, c.beta2],
            eps: c.eps,
            weight_decay: c.weight_decay,
            ..OptimizerConfig::new(rates.a)
        };
        cfg.validate()?;
        let g = read_grads(ad, &grads)?;
        adamw_step(ad, &g, st, &cfg, rates_from(rates))?;
        Ok(())
    })
}

/// Matthews correlation of a binary confusion matrix; 0 when undefined.
#[no_mangle]
pub extern "C" fn trilora_mcc(tp: u64, tn: u64, fp: u64, fn_: u64) -> f64 {
    mcc(tp, tn, fp, fn_)
}

/// Serializes the adapter as a JSON checkpoint into a new string owned by the
/// caller.
///
/// # Safety
/// `adapter` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn trilora_checkpoint_to_json(
    adapter: *const TriloraAdapter,
    encoding: TriloraEncoding,
    out: *mut *mut c_char,
) -> TriloraStatus {
    guard(|| {
        let ad = &handle(adapter, "adapter")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let enc = match encoding {
            TriloraEncoding::Base64 => Encoding::Base64,
            TriloraEncoding::Array => Encoding::Array,
        };
        alloc_string(Checkpoint::Tri(ad.clone()).to_json(enc)?, out)
    })
}

/// Loads a tri-matrix adapter from a JSON checkpoint. LoRA checkpoints are
/// rejected with `TRILORA_STATUS_INVALID_ARGUMENT`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn trilora_checkpoint_from_json(
    json: *const c_char,
    out: *mut *mut TriloraAdapter,
) -> TriloraStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| Failure(TriloraStatus::Parse, format!("checkpoint is not UTF-8: {e}")))?;
        match Checkpoint::from_json(text)? {
            Checkpoint::Tri(ad) => {
                *out = Box::into_raw(Box::new(TriloraAdapter(ad)));
                Ok(())
            }
            Checkpoint::Lora(_) => Err(Failure(
                TriloraStatus::InvalidArgument,
                "checkpoint holds a LoRA adapter, expected a tri-matrix adapter".into(),
            )),
        }
    })
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be NULL or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn trilora_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
