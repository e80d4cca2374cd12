//! C ABI over the semiwave library.
//!
//! Every function returns an [`SwStatus`]; results go through out pointers.
//! Handles are opaque and must be released with the matching `*_free`
//! function. After a failure, [`sw_last_error`] holds a message for the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use semiwave::cli::{run_experiment, ExperimentConfig, Pipeline, Report, RunOptions};
use semiwave::field::WaveField;
use semiwave::forward::{solve_semilinear, ForwardOptions};
use semiwave::geometry::{Domain, SpaceTimeGrid, SpatialGrid};
use semiwave::nonlinearity::{DataSpec, Nonlinearity};
use semiwave::Error;

/// Result of every call. The numeric values of the first five match the
/// exit codes of the command line tool.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwStatus {
    Ok = 0,
    Io = 1,
    Config = 2,
    Numerical = 3,
    Resolution = 4,
    NullPointer = 5,
    InvalidUtf8 = 6,
    Panic = 7,
}

pub struct SwDomain(Domain);
pub struct SwGrid(Arc<SpaceTimeGrid>);
pub struct SwNonlinearity(Nonlinearity);
pub struct SwField(WaveField);
pub struct SwReport(Report);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SwStatus {
    match e.exit_code() {
        1 => SwStatus::Io,
        3 => SwStatus::Numerical,
        4 => SwStatus::Resolution,
        _ => SwStatus::Config,
    }
}

enum Failure {
    Lib(Error),
    Null(&'static str),
    Utf8(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> SwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SwStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(name))) => {
            set_error(&format!("{name} is null"));
            SwStatus::NullPointer
        }
        Ok(Err(Failure::Utf8(name))) => {
            set_error(&format!("{name} is not valid UTF-8"));
            SwStatus::InvalidUtf8
        }
        Err(_) => {
            set_error("internal panic");
            SwStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn text<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(name))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Outcome {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_value<T>(out: *mut T, value: T) -> Outcome {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = value;
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the last error message of this thread into `buf` (NUL terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sw_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Interval `[0, length]` with the default collar.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sw_domain_interval(length: f64, out: *mut *mut SwDomain) -> SwStatus {
    guard(|| put(out, SwDomain(Domain::interval(length)?)))
}

/// Rectangle `[0, width] x [0, height]` with the default collar.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sw_domain_rectangle(width: f64, height: f64, out: *mut *mut SwDomain) -> SwStatus {
    guard(|| put(out, SwDomain(Domain::rectangle(width, height)?)))
}

/// Disk of the given radius centred at the origin.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sw_domain_disk(radius: f64, out: *mut *mut SwDomain) -> SwStatus {
    guard(|| put(out, SwDomain(Domain::disk(radius)?)))
}

/// # Safety
/// `domain` must be null or a handle from `sw_domain_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sw_domain_free(domain: *mut SwDomain) {
    release(domain)
}

/// Uniform grid with `nodes` per side on `[0, horizon]` at Courant number `cfl`.
///
/// # Safety
/// `domain` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sw_grid_new(domain: *const SwDomain, nodes: usize, horizon: f64, cfl: f64, out: *mut *mut SwGrid) -> SwStatus {
    guard(|| {
        let d = get(domain, "domain")?;
        let space = SpatialGrid::new(&d.0, nodes)?;
        put(out, SwGrid(Arc::new(SpaceTimeGrid::with_cfl(space, horizon, horizon, cfl)?)))
    })
}

/// Number of spatial nodes, number of time levels and time step.
///
/// # Safety
/// `grid` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sw_grid_dims(grid: *const SwGrid, nodes: *mut usize, levels: *mut usize, dt: *mut f64) -> SwStatus {
    guard(|| {
        let g = &get(grid, "grid")?.0;
        put_value(nodes, g.ns())?;
        put_value(levels, g.nt + 1)?;
        put_value(dt, g.dt)
    })
}

/// # Safety
/// `grid` must be null or a handle from `sw_grid_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sw_grid_free(grid: *mut SwGrid) {
    release(grid)
}

/// Nonlinearity from its JSON description, e.g. `{"kind": "cubic"}`.
///
/// # Safety
/// `json` must be a NUL terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sw_nonlinearity_from_json(json: *const c_char, out: *mut *mut SwNonlinearity) -> SwStatus {
    guard(|| {
        let f: Nonlinearity = serde_json::from_str(text(json, "json")?).map_err(Error::from)?;
        put(out, SwNonlinearity(f))
    })
}

/// `F(t, (x, y), u)`.
///
/// # Safety
/// `f` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sw_nonlinearity_eval(f: *const SwNonlinearity, t: f64, x: f64, y: f64, u: f64, out: *mut f64) -> SwStatus {
    guard(|| put_value(out, get(f, "nonlinearity")?.0.eval(t, [x, y], u)))
}

/// `d_u F(t, (x, y), u)`.
///
/// # Safety
/// `f` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sw_nonlinearity_du(f: *const SwNonlinearity, t: f64, x: f64, y: f64, u: f64, out: *mut f64) -> SwStatus {
    guard(|| put_value(out, get(f, "nonlinearity")?.0.du(t, [x, y], u)))
}

/// # Safety
/// `f` must be null or a handle from `sw_nonlinearity_from_json` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sw_nonlinearity_free(f: *mut SwNonlinearity) {
    release(f)
}

/// Forward solve with Dirichlet data given as JSON `{"f": .., "u0": .., "u1": ..}`.
///
/// # Safety
/// Handles must be live, `data_json` NUL terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sw_solve(f: *const SwNonlinearity, grid: *const SwGrid, data_json: *const c_char, out: *mut *mut SwField) -> SwStatus {
    guard(|| {
        let f = &get(f, "nonlinearity")?.0;
        let g = &get(grid, "grid")?.0;
        let spec: DataSpec = serde_json::from_str(text(data_json, "data_json")?).map_err(Error::from)?;
        let u = solve_semilinear(f, &spec.sample(g.clone()), &ForwardOptions::default())?;
        put(out, SwField(u))
    })
}

/// Largest `|u|` over the grid.
///
/// # Safety
/// `field` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sw_field_sup_abs(field: *const SwField, out: *mut f64) -> SwStatus {
    guard(|| put_value(out, get(field, "field")?.0.sup_abs()))
}

/// Copies time level `level` into `buf`, which must hold `len >= nodes` values.
///
/// # Safety
/// `field` must be a live handle and `buf` point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sw_field_level(field: *const SwField, level: usize, buf: *mut f64, len: usize) -> SwStatus {
    guard(|| {
        let u = &get(field, "field")?.0;
        if buf.is_null() {
            return Err(Failure::Null("buf"));
        }
        if level >= u.levels() || len < u.ns() {
            return Err(Error::Shape(format!("level {level} of {}, buffer {len} for {} nodes", u.levels(), u.ns())).into());
        }
        ptr::copy_nonoverlapping(u.level(level).as_ptr(), buf, u.ns());
        Ok(())
    })
}

/// # Safety
/// `field` must be null or a handle from `sw_solve` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sw_field_free(field: *mut SwField) {
    release(field)
}

/// Runs a pipeline (`"forward"`, `"recover_nonlinearity"`, ...) on a JSON
/// experiment config, writing its outputs into `out_dir`.
///
/// # Safety
/// Strings must be NUL terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sw_run_experiment(pipeline: *const c_char, config_json: *const c_char, out_dir: *const c_char, out: *mut *mut SwReport) -> SwStatus {
    guard(|| {
        let name = text(pipeline, "pipeline")?;
        let p: Pipeline = serde_json::from_value(serde_json::Value::String(name.into())).map_err(|_| Error::Config(format!("unknown pipeline '{name}'")))?;
        let cfg = ExperimentConfig::from_json(text(config_json, "config_json")?)?;
        let opts = RunOptions { out: Some(PathBuf::from(text(out_dir, "out_dir")?)), seed: None };
        put(out, SwReport(run_experiment(p, cfg, &opts)?))
    })
}

/// A named number of the report, e.g. `"sup_relative_error"`.
///
/// # Safety
/// `report` must be a live handle, `name` NUL terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sw_report_value(report: *const SwReport, name: *const c_char, out: *mut f64) -> SwStatus {
    guard(|| {
        let r = &get(report, "report")?.0;
        let key = text(name, "name")?;
        let v = r.values.get(key).ok_or_else(|| Error::Config(format!("report has no value '{key}'")))?;
        put_value(out, v.value)
    })
}

/// The report as JSON; release the string with [`sw_string_free`].
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sw_report_json(report: *const SwReport, out: *mut *mut c_char) -> SwStatus {
    guard(|| {
        let json = get(report, "report")?.0.to_json()?;
        let c = CString::new(json).map_err(|e| Error::Config(e.to_string()))?;
        put_value(out, c.into_raw())
    })
}

/// # Safety
/// `report` must be null or a handle from `sw_run_experiment` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sw_report_free(report: *mut SwReport) {
    release(report)
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sw_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
