//! C interface to `opf_distill`.
//!
//! Objects are opaque handles created by `od_*_new`/`od_*_load` style calls
//! and released with the matching `od_*_free`. Every fallible call returns an
//! [`OdStatus`]; on failure a message is available from [`od_last_error`] on
//! the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nalgebra::DVector;
use opf_distill::grid::FeederModel;
use opf_distill::map::{DistillationMap, Method};
use opf_distill::pipeline::{AlgorithmSettings, Workbench};
use opf_distill::proxalg::GroupMode;
use opf_distill::scenario::{benchmark_config, benchmark_feeder, generate_synthetic, ScenarioSet};
use opf_distill::type1::Target;
use opf_distill::{Error, ErrorKind};

/// Status codes. Values 2 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdStatus {
    Ok = 0,
    /// A required pointer was null or a buffer was too small.
    InvalidArgument = 1,
    /// Bad configuration or parameter value.
    Usage = 2,
    /// Malformed or inconsistent input data.
    Data = 3,
    /// A solver or factorization failed.
    Numeric = 4,
    /// Internal panic.
    Panic = 5,
}

pub struct OdFeeder(FeederModel);

pub struct OdScenarios(ScenarioSet);

pub struct OdMap(DistillationMap);

/// Feeder plus normalized scenarios, ready for fitting and evaluation.
pub struct OdWorkbench(Workbench);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct OdMetrics {
    pub data_error: f64,
    pub minimizer_error: f64,
    /// Voltage samples per model (`N·T` minus failed AC scenarios).
    pub linear_samples: usize,
    pub linear_out_of_band_fraction: f64,
    pub ac_samples: usize,
    pub ac_out_of_band_fraction: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: OdStatus, msg: impl Into<String>) -> OdStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> OdStatus {
    let status = match e.kind() {
        ErrorKind::Usage => OdStatus::Usage,
        ErrorKind::Data => OdStatus::Data,
        ErrorKind::Numeric => OdStatus::Numeric,
    };
    fail(status, e.to_string())
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), OdStatus>) -> OdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OdStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(OdStatus::Panic, "internal panic"),
    }
}

unsafe fn arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, OdStatus> {
    p.as_ref()
        .ok_or_else(|| fail(OdStatus::InvalidArgument, format!("{name} is null")))
}

unsafe fn string(p: *const c_char, name: &str) -> Result<String, OdStatus> {
    if p.is_null() {
        return Err(fail(OdStatus::InvalidArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| fail(OdStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), OdStatus> {
    if out.is_null() {
        return Err(fail(OdStatus::InvalidArgument, "output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn od_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// The built-in 37-bus benchmark feeder.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn od_feeder_benchmark(out: *mut *mut OdFeeder) -> OdStatus {
    guard(|| put(out, OdFeeder(benchmark_feeder())))
}

/// # Safety
/// Paths must be NUL-terminated strings; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn od_feeder_load_csv(
    buses: *const c_char,
    lines: *const c_char,
    out: *mut *mut OdFeeder,
) -> OdStatus {
    guard(|| {
        let b = PathBuf::from(string(buses, "buses")?);
        let l = PathBuf::from(string(lines, "lines")?);
        put(
            out,
            OdFeeder(FeederModel::load_csv(b, l).map_err(from_error)?),
        )
    })
}

/// Number of non-substation buses.
///
/// # Safety
/// `feeder` must be a live handle and `n` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn od_feeder_bus_count(feeder: *const OdFeeder, n: *mut usize) -> OdStatus {
    guard(|| {
        let f = arg(feeder, "feeder")?;
        if n.is_null() {
            return Err(fail(OdStatus::InvalidArgument, "n is null"));
        }
        *n = f.0.n();
        Ok(())
    })
}

/// # Safety
/// `feeder` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn od_feeder_free(feeder: *mut OdFeeder) {
    free(feeder)
}

/// Seeded synthetic scenarios for the benchmark feeder (`P = 50`).
///
/// # Safety
/// `feeder` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn od_scenarios_benchmark(
    feeder: *const OdFeeder,
    seed: u64,
    t: usize,
    out: *mut *mut OdScenarios,
) -> OdStatus {
    guard(|| {
        let f = arg(feeder, "feeder")?;
        let set = generate_synthetic(&benchmark_config(seed, t), &f.0).map_err(from_error)?;
        put(out, OdScenarios(set))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn od_scenarios_load_csv(
    path: *const c_char,
    out: *mut *mut OdScenarios,
) -> OdStatus {
    guard(|| {
        let p = string(path, "path")?;
        put(
            out,
            OdScenarios(ScenarioSet::load_csv(p).map_err(from_error)?),
        )
    })
}

/// # Safety
/// `scenarios` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn od_scenarios_save_csv(
    scenarios: *const OdScenarios,
    path: *const c_char,
) -> OdStatus {
    guard(|| {
        let s = arg(scenarios, "scenarios")?;
        let p = string(path, "path")?;
        s.0.save_csv(p).map_err(from_error)
    })
}

/// Feature count `P` and scenario count `T`.
///
/// # Safety
/// `scenarios` must be a live handle; `p` and `t` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn od_scenarios_dims(
    scenarios: *const OdScenarios,
    p: *mut usize,
    t: *mut usize,
) -> OdStatus {
    guard(|| {
        let s = arg(scenarios, "scenarios")?;
        if p.is_null() || t.is_null() {
            return Err(fail(OdStatus::InvalidArgument, "p or t is null"));
        }
        *p = s.0.p();
        *t = s.0.t();
        Ok(())
    })
}

/// # Safety
/// `scenarios` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn od_scenarios_free(scenarios: *mut OdScenarios) {
    free(scenarios)
}

/// Copies both inputs; the handles stay owned by the caller. `by_bus`
/// groups the features of each bus together instead of one group per
/// feature.
///
/// # Safety
/// `feeder` and `scenarios` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn od_workbench_new(
    feeder: *const OdFeeder,
    scenarios: *const OdScenarios,
    nu: f64,
    rho: f64,
    by_bus: bool,
    out: *mut *mut OdWorkbench,
) -> OdStatus {
    guard(|| {
        let f = arg(feeder, "feeder")?;
        let s = arg(scenarios, "scenarios")?;
        let mode = if by_bus {
            GroupMode::Bus
        } else {
            GroupMode::Column
        };
        let wb = Workbench::new(f.0.clone(), s.0.clone(), nu, rho, mode).map_err(from_error)?;
        put(out, OdWorkbench(wb))
    })
}

/// # Safety
/// `wb` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn od_workbench_free(wb: *mut OdWorkbench) {
    free(wb)
}

unsafe fn fit(
    wb: *const OdWorkbench,
    method: *const c_char,
    target: Target,
    seed: u64,
    out: *mut *mut OdMap,
) -> OdStatus {
    guard(|| {
        let w = arg(wb, "workbench")?;
        let name = string(method, "method")?;
        let m: Method = name
            .parse()
            .map_err(|_| fail(OdStatus::Usage, format!("unknown method `{name}`")))?;
        let fitted =
            w.0.fit(m, target, &AlgorithmSettings::default(), seed)
                .map_err(from_error)?;
        put(out, OdMap(fitted.map))
    })
}

/// Fits `method` (`PCA`, `DEIM`, `GL`, `GL2`, `BGL`, `BGL2`, any case)
/// with `k` features.
///
/// # Safety
/// `wb` must be a live handle, `method` a NUL-terminated string and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn od_fit_k(
    wb: *const OdWorkbench,
    method: *const c_char,
    k: usize,
    seed: u64,
    out: *mut *mut OdMap,
) -> OdStatus {
    fit(wb, method, Target::K(k), seed, out)
}

/// Fits a penalized method at a fixed `lambda`.
///
/// # Safety
/// As for [`od_fit_k`].
#[no_mangle]
pub unsafe extern "C" fn od_fit_lambda(
    wb: *const OdWorkbench,
    method: *const c_char,
    lambda: f64,
    seed: u64,
    out: *mut *mut OdMap,
) -> OdStatus {
    fit(wb, method, Target::Lambda(lambda), seed, out)
}

/// # Safety
/// `wb` and `map` must be live handles and `metrics` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn od_evaluate(
    wb: *const OdWorkbench,
    map: *const OdMap,
    metrics: *mut OdMetrics,
) -> OdStatus {
    guard(|| {
        let w = arg(wb, "workbench")?;
        let m = arg(map, "map")?;
        if metrics.is_null() {
            return Err(fail(OdStatus::InvalidArgument, "metrics is null"));
        }
        let (rep, _) = w.0.evaluate(&m.0).map_err(from_error)?;
        *metrics = OdMetrics {
            data_error: rep.data_error,
            minimizer_error: rep.minimizer_error,
            linear_samples: rep.linear.samples,
            linear_out_of_band_fraction: rep.linear.out_of_band_fraction,
            ac_samples: rep.ac.samples,
            ac_out_of_band_fraction: rep.ac.out_of_band_fraction,
        };
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn od_map_load(path: *const c_char, out: *mut *mut OdMap) -> OdStatus {
    guard(|| {
        let p = PathBuf::from(string(path, "path")?);
        put(out, OdMap(DistillationMap::load(&p).map_err(from_error)?))
    })
}

/// # Safety
/// `map` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn od_map_save(map: *const OdMap, path: *const c_char) -> OdStatus {
    guard(|| {
        let m = arg(map, "map")?;
        let p = PathBuf::from(string(path, "path")?);
        m.0.save(&p).map_err(from_error)
    })
}

/// Feature count `P` and number of kept features or components `K`.
///
/// # Safety
/// `map` must be a live handle; `p` and `k` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn od_map_dims(map: *const OdMap, p: *mut usize, k: *mut usize) -> OdStatus {
    guard(|| {
        let m = arg(map, "map")?;
        if p.is_null() || k.is_null() {
            return Err(fail(OdStatus::InvalidArgument, "p or k is null"));
        }
        *p = m.0.p();
        *k = m.0.k();
        Ok(())
    })
}

/// Writes the selected feature indices into `buf` (capacity `cap`) and
/// their count into `len`. PCA maps select nothing. When `cap` is too small
/// `len` still receives the required size.
///
/// # Safety
/// `map` must be a live handle, `buf` valid for `cap` writes and `len` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn od_map_selected(
    map: *const OdMap,
    buf: *mut usize,
    cap: usize,
    len: *mut usize,
) -> OdStatus {
    guard(|| {
        let m = arg(map, "map")?;
        if len.is_null() {
            return Err(fail(OdStatus::InvalidArgument, "len is null"));
        }
        let sel = m.0.selected();
        *len = sel.len();
        if sel.len() > cap {
            return Err(fail(
                OdStatus::InvalidArgument,
                format!("buffer holds {cap}, need {}", sel.len()),
            ));
        }
        if !sel.is_empty() {
            if buf.is_null() {
                return Err(fail(OdStatus::InvalidArgument, "buf is null"));
            }
            std::ptr::copy_nonoverlapping(sel.as_ptr(), buf, sel.len());
        }
        Ok(())
    })
}

/// `out = W θ` for one normalized scenario of length `p`.
///
/// # Safety
/// `map` must be a live handle; `theta` and `out` valid for `p` elements.
#[no_mangle]
pub unsafe extern "C" fn od_map_apply(
    map: *const OdMap,
    theta: *const f64,
    p: usize,
    out: *mut f64,
) -> OdStatus {
    guard(|| {
        let m = arg(map, "map")?;
        if theta.is_null() || out.is_null() {
            return Err(fail(OdStatus::InvalidArgument, "theta or out is null"));
        }
        let v = DVector::from_column_slice(std::slice::from_raw_parts(theta, p));
        let r = m.0.apply(&v).map_err(from_error)?;
        std::ptr::copy_nonoverlapping(r.as_ptr(), out, p);
        Ok(())
    })
}

/// # Safety
/// `map` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn od_map_free(map: *mut OdMap) {
    free(map)
}
