//! C ABI over the diagnostics layer: attention-matrix classification,
//! error-rate aggregation, F0 statistics, and the Mann-Whitney test.
//!
//! Conventions: every fallible function returns a `tlb_status` code and
//! writes results through out-pointers; handles are opaque and freed with
//! their matching `_free` function; the last error message is kept per
//! thread and read with `tlb_last_error`. The matching declarations live in
//! `include/taclab.h`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::path::Path;

use taclab::diagnostics::{
    detect_alignment_errors, f0_std_voiced, mann_whitney_u, read_attn, AttentionMatrix,
    Classification, F0Track, Thresholds,
};

pub const TLB_OK: c_int = 0;
pub const TLB_ERR_INVALID: c_int = 1;
pub const TLB_ERR_FORMAT: c_int = 2;
pub const TLB_ERR_IO: c_int = 3;
pub const TLB_ERR_PANIC: c_int = 4;

pub const TLB_CLEAN: c_int = 0;
pub const TLB_DISCONTINUOUS: c_int = 1;
pub const TLB_INCOMPLETE: c_int = 2;
pub const TLB_OVERESTIMATED: c_int = 3;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &taclab::Error) -> c_int {
    match err {
        taclab::Error::Io(_) => TLB_ERR_IO,
        taclab::Error::Format(_) => TLB_ERR_FORMAT,
        _ => TLB_ERR_INVALID,
    }
}

fn catch<F: FnOnce() -> c_int + std::panic::UnwindSafe>(f: F) -> c_int {
    match std::panic::catch_unwind(f) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            TLB_ERR_PANIC
        }
    }
}

/// Opaque attention-matrix handle.
pub struct TlbAttention {
    inner: AttentionMatrix,
}

/// Pointer to the classification label of this thread's last error; valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tlb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version string (static storage).
#[no_mangle]
pub extern "C" fn tlb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a binary `.attn` file into a new handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tlb_attn_load(
    path: *const c_char,
    out: *mut *mut TlbAttention,
) -> c_int {
    if path.is_null() || out.is_null() {
        set_error("null pointer argument");
        return TLB_ERR_INVALID;
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s.to_owned(),
        Err(_) => {
            set_error("path is not valid UTF-8");
            return TLB_ERR_INVALID;
        }
    };
    let out_addr = out as usize;
    catch(move || match read_attn(Path::new(&path)) {
        Ok(m) => {
            let handle = Box::into_raw(Box::new(TlbAttention { inner: m }));
            unsafe { *(out_addr as *mut *mut TlbAttention) = handle };
            TLB_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    })
}

/// Builds a handle from a row-major `steps x positions` weight buffer.
/// Rows must be valid distributions (non-negative, summing to 1).
///
/// # Safety
/// `data` must point to `steps * positions` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tlb_attn_from_data(
    data: *const f64,
    steps: usize,
    positions: usize,
    out: *mut *mut TlbAttention,
) -> c_int {
    if data.is_null() || out.is_null() {
        set_error("null pointer argument");
        return TLB_ERR_INVALID;
    }
    let buf = std::slice::from_raw_parts(data, steps.saturating_mul(positions)).to_vec();
    let out_addr = out as usize;
    catch(move || {
        let arr = match ndarray_from(buf, steps, positions) {
            Ok(a) => a,
            Err(msg) => {
                set_error(&msg);
                return TLB_ERR_INVALID;
            }
        };
        match AttentionMatrix::new(arr) {
            Ok(m) => {
                let handle = Box::into_raw(Box::new(TlbAttention { inner: m }));
                unsafe { *(out_addr as *mut *mut TlbAttention) = handle };
                TLB_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

fn ndarray_from(
    buf: Vec<f64>,
    steps: usize,
    positions: usize,
) -> std::result::Result<ndarray::Array2<f64>, String> {
    if steps == 0 || positions == 0 {
        return Err("empty attention matrix".into());
    }
    ndarray::Array2::from_shape_vec((steps, positions), buf)
        .map_err(|e| format!("bad buffer shape: {e}"))
}

// the core crate re-exports ndarray types in its public API
use taclab::ndarray;

/// Frees a handle; a null pointer is a no-op.
///
/// # Safety
/// `m` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn tlb_attn_free(m: *mut TlbAttention) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Decoder steps in the matrix.
///
/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tlb_attn_steps(m: *const TlbAttention) -> usize {
    if m.is_null() {
        return 0;
    }
    (*m).inner.steps()
}

/// Encoder positions in the matrix.
///
/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tlb_attn_positions(m: *const TlbAttention) -> usize {
    if m.is_null() {
        return 0;
    }
    (*m).inner.positions()
}

/// Classifies the matrix against the fatal-error taxonomy. Negative
/// threshold arguments select the defaults (1, 3, 1, 40).
///
/// # Safety
/// `m` and `out_class` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tlb_attn_classify(
    m: *const TlbAttention,
    back_tol: c_int,
    fwd_skip: c_int,
    end_slack: c_int,
    dwell_max: c_int,
    out_class: *mut c_int,
) -> c_int {
    if m.is_null() || out_class.is_null() {
        set_error("null pointer argument");
        return TLB_ERR_INVALID;
    }
    let d = Thresholds::default();
    let pick = |v: c_int, dflt: usize| if v < 0 { dflt } else { v as usize };
    let th = Thresholds {
        back_tol: pick(back_tol, d.back_tol),
        fwd_skip: pick(fwd_skip, d.fwd_skip),
        end_slack: pick(end_slack, d.end_slack),
        dwell_max: pick(dwell_max, d.dwell_max),
    };
    let matrix = &(*m).inner;
    let out_addr = out_class as usize;
    catch(move || {
        let report = detect_alignment_errors(matrix, &th);
        let code = match report.classification {
            Classification::Clean => TLB_CLEAN,
            Classification::Discontinuous => TLB_DISCONTINUOUS,
            Classification::Incomplete => TLB_INCOMPLETE,
            Classification::Overestimated => TLB_OVERESTIMATED,
        };
        unsafe { *(out_addr as *mut c_int) = code };
        TLB_OK
    })
}

/// Mann-Whitney U and two-sided p for two score arrays.
///
/// # Safety
/// `a`/`b` must point to `na`/`nb` doubles; `out_u`/`out_p` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tlb_mann_whitney(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    out_u: *mut f64,
    out_p: *mut f64,
) -> c_int {
    if a.is_null() || b.is_null() || out_u.is_null() || out_p.is_null() {
        set_error("null pointer argument");
        return TLB_ERR_INVALID;
    }
    let va = std::slice::from_raw_parts(a, na).to_vec();
    let vb = std::slice::from_raw_parts(b, nb).to_vec();
    let (u_addr, p_addr) = (out_u as usize, out_p as usize);
    catch(move || match mann_whitney_u(&va, &vb) {
        Ok(mw) => {
            unsafe {
                *(u_addr as *mut f64) = mw.u;
                *(p_addr as *mut f64) = mw.p;
            }
            TLB_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    })
}

/// Population standard deviation of F0 over voiced frames. `voiced` uses
/// 0 = unvoiced, nonzero = voiced.
///
/// # Safety
/// `f0` and `voiced` must point to `n` elements; `out_std` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tlb_f0_std(
    f0: *const f64,
    voiced: *const u8,
    n: usize,
    out_std: *mut f64,
) -> c_int {
    if f0.is_null() || voiced.is_null() || out_std.is_null() {
        set_error("null pointer argument");
        return TLB_ERR_INVALID;
    }
    let vf: Vec<f64> = std::slice::from_raw_parts(f0, n).to_vec();
    let vv: Vec<bool> = std::slice::from_raw_parts(voiced, n)
        .iter()
        .map(|&x| x != 0)
        .collect();
    let times: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let out_addr = out_std as usize;
    catch(move || {
        let track = match F0Track::new(times, vf, vv) {
            Ok(t) => t,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        match f0_std_voiced(&track) {
            Ok(s) => {
                unsafe { *(out_addr as *mut f64) = s };
                TLB_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}
