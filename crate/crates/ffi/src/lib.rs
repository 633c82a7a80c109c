//! C ABI over the `fisherlora` pipeline.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! style functions and released with the matching `*_free`. Every fallible
//! function returns an [`FlStatus`]; on failure a message is kept per thread
//! and can be copied out with [`fl_last_error_message`]. Matrices are passed
//! as row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fisherlora::autodiff::LayerTap;
use fisherlora::fisher::{fisher_energy_factored, FisherFactors};
use fisherlora::harness::checkpoint::{lora_checkpoint, lora_from_checkpoint, Checkpoint};
use fisherlora::harness::config::{InitMethod, RunConfig};
use fisherlora::harness::pipeline::init_layer;
use fisherlora::lora::LoraInit;
use fisherlora::subspace::{Criterion, SelectionStrategy};
use fisherlora::{Error, Matrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    RankTooLarge = 5,
    Numerical = 6,
    Io = 7,
    Checkpoint = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlCriterion {
    Min = 0,
    Max = 1,
    Random = 2,
}

/// Opaque dense matrix.
pub struct FlMatrix(Matrix);

/// Opaque Fisher factor accumulator for one layer.
pub struct FlFisherFactors(FisherFactors);

/// Opaque LoRA initialization for one layer.
pub struct FlLoraInit(LoraInit);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> FlStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::BufferLength { .. } | Error::EmptyShape { .. } => FlStatus::ShapeMismatch,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::NonFiniteBatchLoss { .. } => FlStatus::NonFinite,
        Error::RankTooLarge { .. } | Error::TopKTooLarge { .. } => FlStatus::RankTooLarge,
        Error::SvdNoConvergence { .. } | Error::Diverged { .. } => FlStatus::Numerical,
        Error::Io(_) => FlStatus::Io,
        Error::Checkpoint { .. } => FlStatus::Checkpoint,
        _ => FlStatus::InvalidArgument,
    }
}

/// Runs `f`, mapping library errors and panics to a status plus message.
fn guard(f: impl FnOnce() -> Result<(), FlStatus>) -> FlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside fisherlora".into());
            FlStatus::Panic
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, FlStatus>;
}

impl<T> OrStatus<T> for fisherlora::Result<T> {
    fn or_status(self) -> Result<T, FlStatus> {
        self.map_err(|e| {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        })
    }
}

fn null(what: &str) -> FlStatus {
    set_error(format!("{what} is null"));
    FlStatus::NullPointer
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, FlStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, FlStatus> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], FlStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_ptr<T>(out: *mut *mut T, value: T) -> Result<(), FlStatus> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, FlStatus> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p).to_str().map(Path::new).map_err(|_| {
        set_error("path is not valid UTF-8".into());
        FlStatus::InvalidArgument
    })
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a `rows × cols` matrix from a row-major buffer of `rows·cols`
/// values.
///
/// # Safety
/// `data` must point to `rows·cols` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fl_matrix_new(rows: usize, cols: usize, data: *const f64, out: *mut *mut FlMatrix) -> FlStatus {
    guard(|| {
        let len = rows.checked_mul(cols).ok_or_else(|| {
            set_error("rows·cols overflows".into());
            FlStatus::InvalidArgument
        })?;
        let values = slice(data, len, "data")?.to_vec();
        let m = Matrix::from_vec(rows, cols, values).or_status()?;
        out_ptr(out, FlMatrix(m))
    })
}

/// # Safety
/// `m` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fl_matrix_free(m: *mut FlMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Writes the row and column counts.
///
/// # Safety
/// `m` must be a live handle; `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fl_matrix_shape(m: *const FlMatrix, rows: *mut usize, cols: *mut usize) -> FlStatus {
    guard(|| {
        let m = deref(m, "matrix")?;
        *deref_mut(rows, "rows")? = m.0.rows();
        *deref_mut(cols, "cols")? = m.0.cols();
        Ok(())
    })
}

/// Copies the row-major contents into `out`, which must hold `len ≥
/// rows·cols` doubles.
///
/// # Safety
/// `m` must be a live handle; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fl_matrix_copy(m: *const FlMatrix, out: *mut f64, len: usize) -> FlStatus {
    guard(|| {
        let m = deref(m, "matrix")?;
        let src = m.0.as_slice();
        if out.is_null() {
            return Err(null("out"));
        }
        if len < src.len() {
            set_error(format!("buffer holds {len} values, matrix has {}", src.len()));
            return Err(FlStatus::BufferTooSmall);
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
        Ok(())
    })
}

/// Empty accumulator for a layer with `n` inputs and `m` outputs.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fl_factors_new(layer_id: usize, n: usize, m: usize, out: *mut *mut FlFisherFactors) -> FlStatus {
    guard(|| {
        if n == 0 || m == 0 {
            set_error("layer dimensions must be positive".into());
            return Err(FlStatus::InvalidArgument);
        }
        out_ptr(out, FlFisherFactors(FisherFactors::new(layer_id, n, m)))
    })
}

/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fl_factors_free(f: *mut FlFisherFactors) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Adds one tap: inputs `x` (`n × l`) and output gradients `g` (`m × l`).
///
/// # Safety
/// All handles must be live.
#[no_mangle]
pub unsafe extern "C" fn fl_factors_accumulate(f: *mut FlFisherFactors, x: *const FlMatrix, g: *const FlMatrix) -> FlStatus {
    guard(|| {
        let f = deref_mut(f, "factors")?;
        let x = deref(x, "x")?;
        let g = deref(g, "g")?;
        let tap = LayerTap::new(f.0.layer_id, x.0.clone(), g.0.clone()).or_status()?;
        f.0.accumulate(&tap).or_status()
    })
}

/// Finalized `S_X` (`n × n`) and `S_Y` (`m × m`) as new matrix handles.
///
/// # Safety
/// `f` must be live; `s_x` and `s_y` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fl_factors_finalize(f: *const FlFisherFactors, s_x: *mut *mut FlMatrix, s_y: *mut *mut FlMatrix) -> FlStatus {
    guard(|| {
        let f = deref(f, "factors")?;
        if s_x.is_null() || s_y.is_null() {
            return Err(null("output pointer"));
        }
        let (a, b) = f.0.finalize().or_status()?;
        out_ptr(s_x, FlMatrix(a))?;
        out_ptr(s_y, FlMatrix(b))
    })
}

/// Factored Fisher Energy `(vᵀS_Xv)(uᵀS_Yu)` for unit `u` (length `m`) and
/// `v` (length `n`).
///
/// # Safety
/// Handles must be live; `u`, `v` must hold `m`, `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fl_fisher_energy(
    s_x: *const FlMatrix,
    s_y: *const FlMatrix,
    u: *const f64,
    m: usize,
    v: *const f64,
    n: usize,
    out: *mut f64,
) -> FlStatus {
    guard(|| {
        let e = fisher_energy_factored(&deref(s_x, "s_x")?.0, &deref(s_y, "s_y")?.0, slice(u, m, "u")?, slice(v, n, "v")?)
            .or_status()?;
        *deref_mut(out, "out")? = e;
        Ok(())
    })
}

/// Surrogate-basis initialization of one layer with Fisher-Energy scaling.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fl_lora_init(
    w0: *const FlMatrix,
    s_x: *const FlMatrix,
    s_y: *const FlMatrix,
    layer_id: usize,
    rank: usize,
    alpha: f64,
    criterion: FlCriterion,
    rng_seed: u64,
    out: *mut *mut FlLoraInit,
) -> FlStatus {
    guard(|| {
        let spec = fisherlora::harness::config::InitSpec { method: InitMethod::Fisher, rank, alpha, ..RunConfig::default().init };
        let criterion = match criterion {
            FlCriterion::Min => Criterion::MinEnergy,
            FlCriterion::Max => Criterion::MaxEnergy,
            FlCriterion::Random => Criterion::Random,
        };
        let strategy = SelectionStrategy { criterion, rng_seed, ..SelectionStrategy::default() };
        let (init, _) =
            init_layer(&deref(w0, "w0")?.0, &deref(s_x, "s_x")?.0, &deref(s_y, "s_y")?.0, layer_id, &spec, &strategy)
                .or_status()?;
        out_ptr(out, FlLoraInit(init))
    })
}

/// # Safety
/// `init` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fl_lora_free(init: *mut FlLoraInit) {
    if !init.is_null() {
        drop(Box::from_raw(init));
    }
}

/// Adapter rank, or 0 for a null handle.
///
/// # Safety
/// `init` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fl_lora_rank(init: *const FlLoraInit) -> usize {
    init.as_ref().map_or(0, |i| i.0.rank())
}

/// Scale applied to `B·A`, or NaN for a null handle.
///
/// # Safety
/// `init` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fl_lora_scale(init: *const FlLoraInit) -> f64 {
    init.as_ref().map_or(f64::NAN, |i| i.0.scale)
}

/// Which factor [`fl_lora_factor`] returns.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlFactor {
    A = 0,
    B = 1,
    WRes = 2,
}

/// Copies `A` (`r × n`), `B` (`m × r`) or `W_res` (`m × n`) into a new handle.
///
/// # Safety
/// `init` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fl_lora_factor(init: *const FlLoraInit, which: FlFactor, out: *mut *mut FlMatrix) -> FlStatus {
    guard(|| {
        let i = &deref(init, "init")?.0;
        let m = match which {
            FlFactor::A => i.a.clone(),
            FlFactor::B => i.b.clone(),
            FlFactor::WRes => i.w_res.clone(),
        };
        out_ptr(out, FlMatrix(m))
    })
}

/// Copies the `rank` selected candidate indices into `out`.
///
/// # Safety
/// `init` must be live; `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn fl_lora_indices(init: *const FlLoraInit, out: *mut usize, len: usize) -> FlStatus {
    guard(|| {
        let i = &deref(init, "init")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        if len < i.indices.len() {
            set_error(format!("buffer holds {len} indices, adapter has {}", i.indices.len()));
            return Err(FlStatus::BufferTooSmall);
        }
        ptr::copy_nonoverlapping(i.indices.as_ptr(), out, i.indices.len());
        Ok(())
    })
}

/// Writes the initialization as a FILT checkpoint.
///
/// # Safety
/// `init` must be live; `path` a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn fl_lora_save(init: *const FlLoraInit, path: *const c_char) -> FlStatus {
    guard(|| {
        let i = &deref(init, "init")?.0;
        lora_checkpoint(i).write(path_arg(path)?).or_status()
    })
}

/// Reads a FILT checkpoint written by [`fl_lora_save`] or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fl_lora_load(path: *const c_char, out: *mut *mut FlLoraInit) -> FlStatus {
    guard(|| {
        let ck = Checkpoint::read(path_arg(path)?).or_status()?;
        let init = lora_from_checkpoint(&ck).or_status()?;
        out_ptr(out, FlLoraInit(init))
    })
}
