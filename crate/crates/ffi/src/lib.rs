//! C ABI over the `wcshift` worst-case shift search.
//!
//! Every function returns a [`WcStatus`]. On failure the message is available
//! from [`wc_last_error_message`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function;
//! strings returned through `char **` must be released with [`wc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use wcshift::data::Cohort;
use wcshift::engine::{find_worst_case_for, FwParams, WorstCaseReport};
use wcshift::losses::{gini, solve_knapsack, LossSpec};
use wcshift::predictors::Predictor;
use wcshift::uncertainty::{chi_square_div, gradmax, uniform, UncertaintyBudget};
use wcshift::{Error, ErrorClass};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Data = 4,
    Numerical = 5,
    Io = 6,
    Panic = 7,
}

/// Cohort handle.
pub struct WcCohort {
    inner: Cohort,
}

/// Predictor handle.
pub struct WcPredictor {
    inner: Predictor,
}

/// Worst-case report handle.
pub struct WcReport {
    inner: WorstCaseReport,
}

/// Frank-Wolfe settings. `draw_size == 0` means the pool size.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct WcFwParams {
    pub iterations: usize,
    pub num_samples: usize,
    pub num_samples2: usize,
    pub momentum: f64,
    pub draw_size: usize,
    pub seed: u64,
    pub literal_sign: bool,
    pub centered: bool,
}

impl From<WcFwParams> for FwParams {
    fn from(p: WcFwParams) -> Self {
        FwParams {
            iterations: p.iterations,
            num_samples: p.num_samples,
            num_samples2: p.num_samples2,
            momentum: p.momentum,
            draw_size: (p.draw_size > 0).then_some(p.draw_size),
            seed: p.seed,
            literal_sign: p.literal_sign,
            centered: p.centered,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(WcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e.class() {
            ErrorClass::Config => WcStatus::Config,
            ErrorClass::Data => WcStatus::Data,
            ErrorClass::Numerical => WcStatus::Numerical,
            ErrorClass::Io => WcStatus::Io,
        };
        Fail(status, e.to_string())
    }
}

fn null(name: &str) -> Fail {
    Fail(WcStatus::NullPointer, format!("`{name}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> WcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WcStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            WcStatus::Panic
        }
    }
}

unsafe fn text<'a>(s: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Fail(WcStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(name))
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn wc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library defaults for the Frank-Wolfe settings.
#[no_mangle]
pub extern "C" fn wc_fw_params_default() -> WcFwParams {
    let p = FwParams::default();
    WcFwParams {
        iterations: p.iterations,
        num_samples: p.num_samples,
        num_samples2: p.num_samples2,
        momentum: p.momentum,
        draw_size: p.draw_size.unwrap_or(0),
        seed: p.seed,
        literal_sign: p.literal_sign,
        centered: p.centered,
    }
}

/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wc_cohort_from_json(json: *const c_char, out_cohort: *mut *mut WcCohort) -> WcStatus {
    guard(|| {
        let slot = out(out_cohort, "out_cohort")?;
        let inner = Cohort::from_json(text(json, "json")?)?;
        *slot = Box::into_raw(Box::new(WcCohort { inner }));
        Ok(())
    })
}

/// # Safety
/// `cohort` must come from [`wc_cohort_from_json`] or be null.
#[no_mangle]
pub unsafe extern "C" fn wc_cohort_free(cohort: *mut WcCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wc_predictor_from_json(json: *const c_char, out_predictor: *mut *mut WcPredictor) -> WcStatus {
    guard(|| {
        let slot = out(out_predictor, "out_predictor")?;
        let inner = Predictor::from_json(text(json, "json")?)?;
        *slot = Box::into_raw(Box::new(WcPredictor { inner }));
        Ok(())
    })
}

/// # Safety
/// `predictor` must come from [`wc_predictor_from_json`] or be null.
#[no_mangle]
pub unsafe extern "C" fn wc_predictor_free(predictor: *mut WcPredictor) {
    if !predictor.is_null() {
        drop(Box::from_raw(predictor));
    }
}

/// Runs the worst-case search. `loss_json` is a loss object such as
/// `{"type":"top-k","k":10}`. `params` may be null for the defaults.
///
/// # Safety
/// Handles must be live, strings NUL-terminated, `out_report` valid.
#[no_mangle]
pub unsafe extern "C" fn wc_find_worst_case(
    cohort: *const WcCohort,
    predictor: *const WcPredictor,
    loss_json: *const c_char,
    rho_ind: f64,
    rho_xi: f64,
    params: *const WcFwParams,
    out_report: *mut *mut WcReport,
) -> WcStatus {
    guard(|| {
        let slot = out(out_report, "out_report")?;
        let cohort = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        let predictor = predictor.as_ref().ok_or_else(|| null("predictor"))?;
        let spec: LossSpec = serde_json::from_str(text(loss_json, "loss_json")?).map_err(Error::from)?;
        let params = params.as_ref().map_or_else(FwParams::default, |p| FwParams::from(*p));
        let budget = UncertaintyBudget::new(rho_ind, rho_xi)?;
        let inner = find_worst_case_for(&cohort.inner, &predictor.inner, &spec, &budget, &params)?;
        *slot = Box::into_raw(Box::new(WcReport { inner }));
        Ok(())
    })
}

/// Worst-case expected decision loss.
///
/// # Safety
/// `report` must be live and `out_value` valid.
#[no_mangle]
pub unsafe extern "C" fn wc_report_value(report: *const WcReport, out_value: *mut f64) -> WcStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        *out(out_value, "out_value")? = r.inner.value;
        Ok(())
    })
}

/// Number of instances in the report.
///
/// # Safety
/// `report` must be live and `out_len` valid.
#[no_mangle]
pub unsafe extern "C" fn wc_report_num_instances(report: *const WcReport, out_len: *mut usize) -> WcStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        *out(out_len, "out_len")? = r.inner.lambda.len();
        Ok(())
    })
}

/// Instance-level shifted distribution, written to `out_q[0..len]`.
///
/// # Safety
/// `report` must be live and `out_q` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn wc_report_instance_distribution(report: *const WcReport, out_q: *mut f64, len: usize) -> WcStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let q = r.inner.shift.instance_distribution()?;
        if len != q.len() {
            return Err(Fail(WcStatus::Config, format!("`len` is {len}, report has {} instances", q.len())));
        }
        if out_q.is_null() {
            return Err(null("out_q"));
        }
        std::slice::from_raw_parts_mut(out_q, len).copy_from_slice(&q);
        Ok(())
    })
}

/// Serializes the report. Free the string with [`wc_string_free`].
///
/// # Safety
/// `report` must be live and `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn wc_report_to_json(report: *const WcReport, out_json: *mut *mut c_char) -> WcStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let json = r.inner.to_json()?;
        *slot = CString::new(json).map_err(|e| Fail(WcStatus::Data, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `report` must come from [`wc_find_worst_case`] or be null.
#[no_mangle]
pub unsafe extern "C" fn wc_report_free(report: *mut WcReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn wc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// χ² divergence `sum (q - p)^2 / p`.
///
/// # Safety
/// `q` and `p` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn wc_chi_square_div(q: *const f64, p: *const f64, len: usize, out_div: *mut f64) -> WcStatus {
    guard(|| {
        let v = chi_square_div(slice(q, len, "q")?, slice(p, len, "p")?)?;
        *out(out_div, "out_div")? = v;
        Ok(())
    })
}

/// Maximizer of `<v, q>` over distributions within χ² radius `rho` of uniform.
///
/// # Safety
/// `v` and `out_q` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn wc_gradmax(v: *const f64, len: usize, rho: f64, out_q: *mut f64) -> WcStatus {
    guard(|| {
        let q = gradmax(slice(v, len, "v")?, &uniform(len), rho)?;
        if out_q.is_null() {
            return Err(null("out_q"));
        }
        std::slice::from_raw_parts_mut(out_q, len).copy_from_slice(&q);
        Ok(())
    })
}

/// Exact 0/1 knapsack. Sets `out_chosen[i]` to 1 for selected items.
///
/// # Safety
/// `values`, `costs` and `out_chosen` must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn wc_solve_knapsack(
    values: *const f64,
    costs: *const i64,
    len: usize,
    budget: i64,
    out_chosen: *mut u8,
) -> WcStatus {
    guard(|| {
        let values = slice(values, len, "values")?;
        let costs: &[i64] = if len == 0 {
            &[]
        } else if costs.is_null() {
            return Err(null("costs"));
        } else {
            std::slice::from_raw_parts(costs, len)
        };
        let chosen = solve_knapsack(values, costs, budget)?;
        if len > 0 {
            if out_chosen.is_null() {
                return Err(null("out_chosen"));
            }
            let mask = std::slice::from_raw_parts_mut(out_chosen, len);
            mask.fill(0);
            for i in chosen {
                mask[i] = 1;
            }
        }
        Ok(())
    })
}

/// Gini coefficient of non-negative values.
///
/// # Safety
/// `values` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn wc_gini(values: *const f64, len: usize, out_gini: *mut f64) -> WcStatus {
    guard(|| {
        let g = gini(slice(values, len, "values")?)?;
        *out(out_gini, "out_gini")? = g;
        Ok(())
    })
}
