//! The estimator ladder: Horvitz–Thompson, Kim–Haziza, efficient-score
//! method of moments, and two-step empirical likelihood.
//!
//! Every estimator has a `_with` form that takes precomputed nuisance
//! predictions ([`Predictions`]) and a fitted form driven by an
//! [`EstimatorSpec`] and a [`ModelCatalog`].
//!
//! Outcome regressions enter through `g_theta(x, z, w) = U_theta(x, m(x, z, w))`
//! and C-functions through `U_theta(x, kappa(x))`, which is exact for
//! estimating functions affine in `y` (means and regression scores).

mod el;
mod spec;
mod summary;

pub use el::{
    el_first_step, el_first_step_at, el_second_step, el_second_step_at, estimate_el_with,
    first_step_constraints, ElOptions, SecondStep, ThetaCoupling,
};
pub use spec::{
    estimate, estimate_fitted, fit_working_models, EstimatorSpec, Method, ModelCatalog,
    WorkingModelSet,
};
pub use summary::SummarySpec;

use crate::data::SurveyDataset;
use crate::el::ELSolution;
use crate::estimand::{solve_weighted_estimating_equation, EqTerm, Estimand};
use crate::error::{Error, Result};
use crate::models::SupportPoint;
use serde::Serialize;

/// Response probabilities below this are clipped inside inverse weights.
pub const PI_FLOOR: f64 = 1e-6;

/// Augmentation term `C_theta` of the efficient score.
#[derive(Debug, Clone, PartialEq)]
pub enum CTerm {
    /// `kappa(x_i)` for every one of the N units.
    PerUnit(Vec<f64>),
    /// A constant estimated as `sum_j omega_j U_theta(x_j, y_j)` over a
    /// weighted respondent support.
    Constant(Vec<SupportPoint>),
    Zero,
}

impl CTerm {
    /// A constant `c` for the population mean.
    pub fn constant_mean(c: f64) -> Self {
        CTerm::Constant(vec![SupportPoint {
            weight: 1.0,
            x: Vec::new(),
            y: c,
        }])
    }
}

/// Nuisance predictions for one dataset.
#[derive(Debug, Clone, Default)]
pub struct Predictions {
    /// Response probabilities, one vector of length n per candidate model.
    pub pi: Vec<Vec<f64>>,
    /// Outcome predictions, one vector of length n per candidate model.
    pub m: Vec<Vec<f64>>,
    pub c: Vec<CTerm>,
}

/// Summary of an empirical likelihood weight vector.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct WeightSummary {
    pub len: usize,
    pub min: f64,
    pub max: f64,
    /// `1 / sum p_i^2`
    pub effective_size: f64,
    pub log_el: f64,
    pub lambda: Vec<f64>,
    pub dual_iterations: usize,
    pub constraint_residual: f64,
}

impl WeightSummary {
    pub fn of(sol: &ELSolution) -> Self {
        WeightSummary {
            len: sol.p.len(),
            min: sol.p.iter().cloned().fold(f64::INFINITY, f64::min),
            max: sol.p.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            effective_size: 1.0 / sol.p.iter().map(|p| p * p).sum::<f64>(),
            log_el: sol.log_el,
            lambda: sol.lambda.clone(),
            dual_iterations: sol.iterations,
            constraint_residual: sol.constraint_residual,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct Diagnostics {
    pub population_size: usize,
    pub n_sampled: usize,
    pub n_respondents: usize,
    /// Outer iterations (fixed-point or Newton) of the final solve.
    pub iterations: usize,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_step: Option<WeightSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub second_step: Option<WeightSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_first_step: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_second_step: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_hat: Option<Vec<f64>>,
}

impl Diagnostics {
    fn for_data(data: &SurveyDataset) -> Self {
        Diagnostics {
            population_size: data.population_size(),
            n_sampled: data.n_sampled(),
            n_respondents: data.n_respondents(),
            ..Default::default()
        }
    }
}

/// A converged estimate. Failures are reported as errors instead.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EstimateResult {
    pub estimator_id: String,
    pub theta_hat: Vec<f64>,
    pub converged: bool,
    pub diagnostics: Diagnostics,
}

fn check_len(what: &str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: v.len(),
            context: what.into(),
        });
    }
    Ok(())
}

fn require_respondents(data: &SurveyDataset) -> Result<()> {
    if data.n_respondents() == 0 {
        return Err(Error::InvalidData("no respondents".into()));
    }
    Ok(())
}

/// Clips respondent response probabilities at [`PI_FLOOR`], recording a
/// warning when that happens.
fn floored_pi(data: &SurveyDataset, pi: &[f64], warnings: &mut Vec<String>) -> Result<Vec<f64>> {
    check_len("response predictions", pi, data.n_sampled())?;
    let m = data.n_respondents();
    let mut clipped = 0;
    let out: Vec<f64> = pi
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if i < m && p < PI_FLOOR {
                clipped += 1;
                PI_FLOOR
            } else {
                p
            }
        })
        .collect();
    if out[..m].iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(Error::InvalidData("response probability not positive on a respondent".into()));
    }
    if clipped > 0 {
        warnings.push(format!(
            "unstable weights: {clipped} respondent response probabilities below {PI_FLOOR:e} were clipped"
        ));
    }
    Ok(out)
}

fn ht_terms<'a>(data: &'a SurveyDataset, pi: &[f64]) -> Vec<EqTerm<'a>> {
    data.respondents()
        .iter()
        .zip(pi)
        .map(|(u, p)| EqTerm::new(u.weight() / p, u.x(), u.outcome()))
        .collect()
}

fn kh_terms<'a>(data: &'a SurveyDataset, pi: &[f64], m_hat: &[f64]) -> Vec<EqTerm<'a>> {
    let m = data.n_respondents();
    let mut terms = Vec::with_capacity(2 * data.n_sampled());
    for (i, u) in data.sampled().iter().enumerate() {
        let w = u.weight();
        if i < m {
            terms.push(EqTerm::new(w / pi[i], u.x(), u.outcome()));
            terms.push(EqTerm::new(w * (1.0 - 1.0 / pi[i]), u.x(), m_hat[i]));
        } else {
            terms.push(EqTerm::new(w, u.x(), m_hat[i]));
        }
    }
    terms
}

/// Appends the `(1 - delta W) C_theta` terms.
fn c_terms<'a>(data: &'a SurveyDataset, c: &'a CTerm, terms: &mut Vec<EqTerm<'a>>) -> Result<()> {
    match c {
        CTerm::Zero => {}
        CTerm::PerUnit(kappa) => {
            if !data.setting().stores_unsampled() {
                return Err(Error::InvalidData(
                    "a C-function of x needs x for every population unit".into(),
                ));
            }
            check_len("C-function predictions", kappa, data.units().len())?;
            for (u, &k) in data.units().iter().zip(kappa) {
                let a = if u.delta { 1.0 - u.weight() } else { 1.0 };
                terms.push(EqTerm::new(a, u.x(), k));
            }
        }
        CTerm::Constant(support) => {
            let s = data.population_size() as f64
                - data.sampled().iter().map(|u| u.weight()).sum::<f64>();
            for sp in support {
                terms.push(EqTerm::new(s * sp.weight, &sp.x, sp.y));
            }
        }
    }
    Ok(())
}

fn finish(id: &str, theta: Vec<f64>, diagnostics: Diagnostics) -> EstimateResult {
    EstimateResult {
        estimator_id: id.to_string(),
        theta_hat: theta,
        converged: true,
        diagnostics,
    }
}

/// Horvitz–Thompson estimator with respondent weights `W / pi`.
/// `pi` has one entry per sampled unit.
pub fn estimate_ht_with(data: &SurveyDataset, pi: &[f64], e: &Estimand) -> Result<EstimateResult> {
    require_respondents(data)?;
    let mut diag = Diagnostics::for_data(data);
    let pi = floored_pi(data, pi, &mut diag.warnings)?;
    let terms = ht_terms(data, &pi);
    let theta = solve_weighted_estimating_equation(e, &terms, None, None)?;
    Ok(finish("HT", theta, diag))
}

/// Kim–Haziza double-robust estimator.
pub fn estimate_kh_with(
    data: &SurveyDataset,
    pi: &[f64],
    m_hat: &[f64],
    e: &Estimand,
) -> Result<EstimateResult> {
    require_respondents(data)?;
    check_len("outcome predictions", m_hat, data.n_sampled())?;
    let mut diag = Diagnostics::for_data(data);
    let pi = floored_pi(data, pi, &mut diag.warnings)?;
    let init = solve_weighted_estimating_equation(e, &ht_terms(data, &pi), None, None)?;
    let terms = kh_terms(data, &pi, m_hat);
    let theta = solve_weighted_estimating_equation(e, &terms, None, Some(&init))?;
    Ok(finish("KH", theta, diag))
}

/// Efficient-score method-of-moments estimator
/// `sum_N { delta W D_theta + (1 - delta W) C_theta } = 0`.
pub fn estimate_mm_with(
    data: &SurveyDataset,
    pi: &[f64],
    m_hat: &[f64],
    c: &CTerm,
    e: &Estimand,
) -> Result<EstimateResult> {
    require_respondents(data)?;
    check_len("outcome predictions", m_hat, data.n_sampled())?;
    let mut diag = Diagnostics::for_data(data);
    let pi = floored_pi(data, pi, &mut diag.warnings)?;
    let init = solve_weighted_estimating_equation(e, &ht_terms(data, &pi), None, None)?;
    let mut terms = kh_terms(data, &pi, m_hat);
    c_terms(data, c, &mut terms)?;
    let theta = solve_weighted_estimating_equation(e, &terms, None, Some(&init))?;
    Ok(finish("MM", theta, diag))
}
