//! Two-step empirical likelihood estimators.
//!
//! The first step calibrates respondent weights to the candidate response
//! and outcome models. The second step re-weights towards the population:
//! through the C-function constraints when `x` is known for everyone
//! (Setting 1), through the biased-sampling likelihood in `V` when only `N`
//! is known (Setting 2), and additionally through an external summary
//! (Setting 3).
//!
//! The outcome constraints and the Setting 1 second step depend on `theta`.
//! [`ThetaCoupling::SelfConsistent`] (the default) evaluates them at the final
//! estimate, i.e. solves `theta = T(theta)` where `T` maps a constraint value
//! to the root of the final weighted equation. [`ThetaCoupling::Profile`]
//! instead maximizes each step's log empirical likelihood over `theta`, which
//! tends to leave the outcome constraints slack.

use super::summary::SummarySpec;
use super::{check_len, require_respondents, CTerm, Diagnostics, EstimateResult, Predictions, WeightSummary};
use crate::data::{ExternalSummary, Setting, SurveyDataset};
use crate::el::{profile_el, solve_biased_el, solve_el_dual, solve_penalized_el, BiasedELSolution, ELSolution, TauConstraint};
use crate::estimand::{solve_weighted_estimating_equation, EqTerm, Estimand};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// How `theta` inside the constraints is tied to the final estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaCoupling {
    #[default]
    SelfConsistent,
    Profile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElOptions {
    pub coupling: ThetaCoupling,
    pub max_iter: usize,
    /// Fixed-point tolerance, relative to `1 + |theta|`.
    pub tol: f64,
}

impl Default for ElOptions {
    fn default() -> Self {
        ElOptions {
            coupling: ThetaCoupling::SelfConsistent,
            max_iter: 50,
            tol: 1e-10,
        }
    }
}

/// Zeroes columns that are constant up to rounding, so that a centred
/// constant model contributes a vacuous constraint instead of noise.
fn clean_columns(g: &mut DMatrix<f64>, raw_scale: &[f64]) {
    for (j, scale) in raw_scale.iter().enumerate() {
        let mut col = g.column_mut(j);
        if col.amax() <= 1e-12 * scale.max(1.0) {
            col.fill(0.0);
        }
    }
}

/// First-step constraint rows over the m respondents: `pi_j - mean_n(pi_j)`
/// for each response model, then `W g_k,theta - mean_n(W g_k,theta)` for
/// each outcome model (q columns per model).
pub fn first_step_constraints(
    data: &SurveyDataset,
    pi: &[Vec<f64>],
    m_hat: &[Vec<f64>],
    e: &Estimand,
    theta: &[f64],
) -> Result<DMatrix<f64>> {
    let n = data.n_sampled();
    let m = data.n_respondents();
    let q = e.q();
    check_len("parameter", theta, q)?;
    let ncol = pi.len() + q * m_hat.len();
    let mut g = DMatrix::zeros(m, ncol);
    let mut scale = Vec::with_capacity(ncol);
    for (j, p) in pi.iter().enumerate() {
        check_len("response predictions", p, n)?;
        let mean = p.iter().sum::<f64>() / n as f64;
        for i in 0..m {
            g[(i, j)] = p[i] - mean;
        }
        scale.push(p.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }
    let mut buf = vec![0.0; q];
    for (k, mk) in m_hat.iter().enumerate() {
        check_len("outcome predictions", mk, n)?;
        let mut vals = DMatrix::zeros(n, q);
        for (i, u) in data.sampled().iter().enumerate() {
            e.u_into(theta, u.x(), mk[i], &mut buf);
            for (c, b) in buf.iter().enumerate() {
                vals[(i, c)] = u.weight() * b;
            }
        }
        for c in 0..q {
            let col = vals.column(c);
            let mean = col.sum() / n as f64;
            let j = pi.len() + k * q + c;
            for i in 0..m {
                g[(i, j)] = col[i] - mean;
            }
            scale.push(col.amax());
        }
    }
    clean_columns(&mut g, &scale);
    Ok(g)
}

fn first_step_error(err: Error) -> Error {
    match err {
        Error::Infeasible(msg) => Error::Infeasible(format!("first step: {msg}")),
        other => other,
    }
}

/// First-step weights with the outcome constraints evaluated at `theta`.
pub fn el_first_step_at(data: &SurveyDataset, preds: &Predictions, e: &Estimand, theta: &[f64]) -> Result<ELSolution> {
    require_respondents(data)?;
    let g = first_step_constraints(data, &preds.pi, &preds.m, e, theta)?;
    solve_el_dual(&g).map_err(first_step_error)
}

/// First step with `theta` profiled out of the log empirical likelihood.
pub fn el_first_step(
    data: &SurveyDataset,
    preds: &Predictions,
    e: &Estimand,
    theta_init: &[f64],
) -> Result<(Vec<f64>, ELSolution)> {
    require_respondents(data)?;
    if preds.pi.len() + preds.m.len() == 0 {
        return Err(Error::Config("the first step needs at least one working model".into()));
    }
    profile_el(
        |t| first_step_constraints(data, &preds.pi, &preds.m, e, t),
        theta_init,
        None,
    )
    .map_err(first_step_error)
}

/// Setting 1 second-step rows `(1 - delta W) C_l,theta(x)` over all N units.
fn population_constraints(data: &SurveyDataset, c: &[CTerm], e: &Estimand, theta: &[f64]) -> Result<DMatrix<f64>> {
    let units = data.units();
    let q = e.q();
    let active: Vec<&CTerm> = c.iter().filter(|t| !matches!(t, CTerm::Zero)).collect();
    let mut g = DMatrix::zeros(units.len(), q * active.len());
    let mut scale = Vec::with_capacity(g.ncols());
    let mut buf = vec![0.0; q];
    for (l, term) in active.iter().enumerate() {
        let mut raw = DMatrix::zeros(units.len(), q);
        match term {
            CTerm::PerUnit(kappa) => {
                check_len("C-function predictions", kappa, units.len())?;
                for (i, u) in units.iter().enumerate() {
                    e.u_into(theta, u.x(), kappa[i], &mut buf);
                    raw.row_mut(i).copy_from_slice(&buf);
                }
            }
            CTerm::Constant(support) => {
                let mut cst = vec![0.0; q];
                for sp in support {
                    e.u_into(theta, &sp.x, sp.y, &mut buf);
                    for (a, b) in cst.iter_mut().zip(&buf) {
                        *a += sp.weight * b;
                    }
                }
                for i in 0..units.len() {
                    raw.row_mut(i).copy_from_slice(&cst);
                }
            }
            CTerm::Zero => unreachable!(),
        }
        for c in 0..q {
            scale.push(raw.column(c).amax());
            for (i, u) in units.iter().enumerate() {
                let a = if u.delta { 1.0 - u.weight() } else { 1.0 };
                g[(i, l * q + c)] = a * raw[(i, c)];
            }
        }
    }
    clean_columns(&mut g, &scale);
    Ok(g)
}

/// Second-step weights.
#[derive(Debug, Clone)]
pub enum SecondStep {
    /// Setting 1: weights over all N units.
    Population(ELSolution),
    /// Settings 2 and 3: weights over the n sampled units.
    Biased(BiasedELSolution),
}

impl SecondStep {
    pub fn p(&self) -> &[f64] {
        match self {
            SecondStep::Population(s) => &s.p,
            SecondStep::Biased(s) => &s.p,
        }
    }

    pub fn summary(&self) -> WeightSummary {
        match self {
            SecondStep::Population(s) => WeightSummary::of(s),
            SecondStep::Biased(s) => {
                let mut w = WeightSummary::of(&ELSolution {
                    p: s.p.clone(),
                    lambda: s.lambda.clone(),
                    log_el: s.log_el,
                    converged: s.converged,
                    constraint_residual: s.constraint_residual,
                    iterations: s.evaluations,
                    dual_trace: Vec::new(),
                });
                w.log_el = s.log_el;
                w
            }
        }
    }
}

fn second_step_error(err: Error) -> Error {
    match err {
        Error::Infeasible(msg) => Error::Infeasible(format!("second step: {msg}")),
        other => other,
    }
}

fn sampled_weights(data: &SurveyDataset) -> Vec<f64> {
    data.sampled().iter().map(|u| u.weight()).collect()
}

/// Second-step weights with the Setting 1 constraints evaluated at `theta`.
/// `ext` is required in Setting 3 and ignored otherwise.
pub fn el_second_step_at(
    data: &SurveyDataset,
    preds: &Predictions,
    e: &Estimand,
    ext: Option<(&ExternalSummary, &SummarySpec)>,
    theta: &[f64],
) -> Result<SecondStep> {
    let step = match data.setting() {
        Setting::Setting1 => {
            let g = population_constraints(data, &preds.c, e, theta)?;
            SecondStep::Population(solve_el_dual(&g).map_err(second_step_error)?)
        }
        Setting::Setting2 => SecondStep::Biased(
            solve_biased_el(&sampled_weights(data), data.population_size(), None).map_err(second_step_error)?,
        ),
        Setting::Setting3 => {
            let (summary, spec) = ext.ok_or_else(|| {
                Error::Config("Setting 3 needs an external summary and its summary type".into())
            })?;
            if spec.dim() != summary.tau_tilde().len() {
                return Err(Error::DimensionMismatch {
                    expected: spec.dim(),
                    found: summary.tau_tilde().len(),
                    context: "external summary dimension".into(),
                });
            }
            let bound = spec.bind(data)?;
            let rows = |tau: &[f64]| bound.rows(tau);
            let dstar = TauConstraint {
                rows: &rows,
                tau_init: bound.tau_init()?,
            };
            SecondStep::Biased(
                solve_penalized_el(&sampled_weights(data), data.population_size(), &dstar, summary)
                    .map_err(second_step_error)?,
            )
        }
    };
    Ok(step)
}

/// Second step with `theta` profiled out (Setting 1). Settings 2 and 3 do
/// not involve `theta`, so `theta_init` is returned unchanged.
pub fn el_second_step(
    data: &SurveyDataset,
    preds: &Predictions,
    e: &Estimand,
    ext: Option<(&ExternalSummary, &SummarySpec)>,
    theta_init: &[f64],
) -> Result<(Vec<f64>, SecondStep)> {
    if data.setting() != Setting::Setting1 {
        let s = el_second_step_at(data, preds, e, ext, theta_init)?;
        return Ok((theta_init.to_vec(), s));
    }
    let (theta, sol) = profile_el(|t| population_constraints(data, &preds.c, e, t), theta_init, None)
        .map_err(second_step_error)?;
    Ok((theta, SecondStep::Population(sol)))
}

/// Root of `sum_resp p2_i p1_i [W_i] U_theta(x_i, y_i) = 0`, with `W_i` only
/// in Setting 1.
fn final_equation(
    data: &SurveyDataset,
    e: &Estimand,
    p1: &[f64],
    p2: &[f64],
    init: &[f64],
) -> Result<Vec<f64>> {
    let with_w = data.setting() == Setting::Setting1;
    let terms: Vec<EqTerm<'_>> = data
        .respondents()
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let w = if with_w { u.weight() } else { 1.0 };
            EqTerm::new(p2[i] * p1[i] * w, u.x(), u.outcome())
        })
        .collect();
    solve_weighted_estimating_equation(e, &terms, None, Some(init))
}

struct Pass {
    theta: Vec<f64>,
    first: ELSolution,
    second: SecondStep,
}

fn one_pass(
    data: &SurveyDataset,
    preds: &Predictions,
    e: &Estimand,
    ext: Option<(&ExternalSummary, &SummarySpec)>,
    at: &[f64],
    second: Option<&SecondStep>,
) -> Result<Pass> {
    let first = el_first_step_at(data, preds, e, at)?;
    let second = match second {
        Some(s) => s.clone(),
        None => el_second_step_at(data, preds, e, ext, at)?,
    };
    let theta = final_equation(data, e, &first.p, second.p(), at)?;
    Ok(Pass { theta, first, second })
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Solves `theta = T(theta)` by Newton's method on `T(theta) - theta` with a
/// forward-difference Jacobian, falling back to plain iteration.
fn fixed_point<F>(t: F, theta0: &[f64], opts: &ElOptions) -> Result<(Vec<f64>, usize)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let q = theta0.len();
    let done = |r: &[f64], th: &[f64]| inf_norm(r) <= opts.tol * (1.0 + inf_norm(th));
    let mut theta = theta0.to_vec();
    let mut iters = 0;
    let newton = (|| -> Result<Option<Vec<f64>>> {
        let mut tv = t(&theta)?;
        for _ in 0..opts.max_iter {
            iters += 1;
            let r: Vec<f64> = tv.iter().zip(&theta).map(|(a, b)| a - b).collect();
            if done(&r, &theta) {
                return Ok(Some(theta.clone()));
            }
            let mut jac = DMatrix::zeros(q, q);
            for j in 0..q {
                let h = 1e-6 * (1.0 + theta[j].abs());
                let mut th = theta.clone();
                th[j] += h;
                let tj = t(&th)?;
                for i in 0..q {
                    jac[(i, j)] = (tj[i] - tv[i]) / h - if i == j { 1.0 } else { 0.0 };
                }
            }
            let Some(step) = jac.lu().solve(&DVector::from_column_slice(&r)) else {
                return Ok(None);
            };
            // damp until the residual does not grow
            let mut s = 1.0;
            let r0 = inf_norm(&r);
            loop {
                let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, d)| a - s * d).collect();
                if let Ok(tc) = t(&cand) {
                    let rc: Vec<f64> = tc.iter().zip(&cand).map(|(a, b)| a - b).collect();
                    if inf_norm(&rc) <= r0 || s < 1e-3 {
                        theta = cand;
                        tv = tc;
                        break;
                    }
                }
                s *= 0.5;
                if s < 1e-3 {
                    return Ok(None);
                }
            }
        }
        Ok(None)
    })();
    if let Ok(Some(th)) = newton {
        return Ok((th, iters));
    }
    let mut theta = theta0.to_vec();
    let mut resid = f64::NAN;
    for _ in 0..4 * opts.max_iter {
        iters += 1;
        let next = t(&theta)?;
        let r: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        resid = inf_norm(&r);
        theta = next;
        if done(&r, &theta) {
            return Ok((theta, iters));
        }
    }
    Err(Error::no_convergence("empirical likelihood fixed point", iters, resid))
}

/// Two-step empirical likelihood estimator on precomputed predictions.
///
/// `theta_init` seeds the profile searches and the fixed point; the
/// Horvitz–Thompson value under the first response model is a good choice.
pub fn estimate_el_with(
    data: &SurveyDataset,
    preds: &Predictions,
    e: &Estimand,
    ext: Option<(&ExternalSummary, &SummarySpec)>,
    theta_init: &[f64],
    opts: &ElOptions,
) -> Result<EstimateResult> {
    require_respondents(data)?;
    check_len("initial parameter", theta_init, e.q())?;
    if preds.pi.is_empty() && preds.m.is_empty() {
        return Err(Error::Config("empirical likelihood needs at least one working model".into()));
    }
    let mut diag = Diagnostics::for_data(data);
    let s1 = data.setting() == Setting::Setting1;
    let depends = !preds.m.is_empty() || (s1 && preds.c.iter().any(|c| !matches!(c, CTerm::Zero)));

    let pass = match opts.coupling {
        ThetaCoupling::Profile => {
            let (t1, first) = el_first_step(data, preds, e, theta_init)?;
            let (t2, second) = el_second_step(data, preds, e, ext, theta_init)?;
            diag.theta_first_step = Some(t1);
            diag.theta_second_step = Some(t2);
            let theta = final_equation(data, e, &first.p, second.p(), theta_init)?;
            diag.iterations = 1;
            Pass { theta, first, second }
        }
        ThetaCoupling::SelfConsistent if !depends => {
            diag.iterations = 1;
            one_pass(data, preds, e, ext, theta_init, None)?
        }
        ThetaCoupling::SelfConsistent => {
            // the Settings 2/3 second step is free of theta; solve it once
            let fixed_second = if s1 {
                None
            } else {
                Some(el_second_step_at(data, preds, e, ext, theta_init)?)
            };
            let t = |th: &[f64]| one_pass(data, preds, e, ext, th, fixed_second.as_ref()).map(|p| p.theta);
            let (theta, iters) = fixed_point(t, theta_init, opts)?;
            diag.iterations = iters;
            let mut pass = one_pass(data, preds, e, ext, &theta, fixed_second.as_ref())?;
            pass.theta = theta;
            pass
        }
    };
    diag.first_step = Some(WeightSummary::of(&pass.first));
    diag.second_step = Some(pass.second.summary());
    if let SecondStep::Biased(b) = &pass.second {
        diag.v_hat = Some(b.v);
        diag.tau_hat = b.tau.clone();
    }
    Ok(EstimateResult {
        estimator_id: "EL".into(),
        theta_hat: pass.theta,
        converged: true,
        diagnostics: diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UnitRecord;

    fn mean() -> Estimand {
        Estimand::mean()
    }

    fn full_data(ys: &[f64]) -> SurveyDataset {
        let units = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| UnitRecord::respondent(vec![i as f64], vec![], 1.0, y))
            .collect();
        SurveyDataset::new(units, ys.len(), Setting::Setting1, vec!["x".into()], vec![]).unwrap()
    }

    #[test]
    fn constant_pi_is_vacuous() {
        let d = full_data(&[1.0, 2.0, 4.0]);
        let preds = Predictions {
            pi: vec![vec![0.3; 3]],
            ..Default::default()
        };
        let s = el_first_step_at(&d, &preds, &mean(), &[0.0]).unwrap();
        for p in &s.p {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn full_data_gives_sample_mean() {
        let ys = [1.0, 2.5, -0.5, 4.0, 3.0];
        let d = full_data(&ys);
        let m: Vec<f64> = ys.iter().map(|y| 0.5 * y + 0.1).collect();
        let preds = Predictions {
            pi: vec![vec![1.0; 5], (0..5).map(|i| 0.5 + 0.05 * i as f64).collect()],
            m: vec![m],
            c: vec![CTerm::PerUnit(vec![0.7; 5])],
        };
        let r = estimate_el_with(&d, &preds, &mean(), None, &[0.0], &ElOptions::default()).unwrap();
        assert!((r.theta_hat[0] - 2.0).abs() < 1e-10, "{:?}", r.theta_hat);
    }

    fn small_sample() -> SurveyDataset {
        let mut units = Vec::new();
        for i in 0..10 {
            let x = i as f64 / 9.0;
            units.push(UnitRecord::respondent(vec![x], vec![], 2.0 + (i % 3) as f64, 1.0 + x + 0.3 * ((i * 7) % 5) as f64));
        }
        for i in 0..5 {
            let x = 0.1 + i as f64 / 5.0;
            units.push(UnitRecord::nonrespondent(vec![x], vec![], 3.0 + (i % 2) as f64));
        }
        SurveyDataset::new(units, 60, Setting::Setting2, vec!["x".into()], vec![]).unwrap()
    }

    #[test]
    fn first_step_columns_are_centred_over_the_sample() {
        let d = small_sample();
        let pi: Vec<f64> = (0..15).map(|i| 0.4 + 0.02 * i as f64).collect();
        let m: Vec<f64> = (0..15).map(|i| 1.0 + 0.1 * i as f64).collect();
        let g = first_step_constraints(&d, &[pi.clone()], &[m.clone()], &mean(), &[1.2]).unwrap();
        let pbar = pi.iter().sum::<f64>() / 15.0;
        assert!((g[(3, 0)] - (pi[3] - pbar)).abs() < 1e-15);
        let w: Vec<f64> = d.sampled().iter().map(|u| u.weight()).collect();
        let gbar = (0..15).map(|i| w[i] * (m[i] - 1.2)).sum::<f64>() / 15.0;
        assert!((g[(3, 1)] - (w[3] * (m[3] - 1.2) - gbar)).abs() < 1e-14);
    }

    #[test]
    fn self_consistent_theta_matches_constraint_value() {
        let d = small_sample();
        let preds = Predictions {
            pi: vec![(0..15).map(|i| 0.4 + 0.02 * i as f64).collect()],
            m: vec![(0..15).map(|i| 1.2 + 0.05 * i as f64).collect()],
            c: vec![],
        };
        let r = estimate_el_with(&d, &preds, &mean(), None, &[1.5], &ElOptions::default()).unwrap();
        let th = r.theta_hat.clone();
        let first = el_first_step_at(&d, &preds, &mean(), &th).unwrap();
        let second = el_second_step_at(&d, &preds, &mean(), None, &th).unwrap();
        let again = final_equation(&d, &mean(), &first.p, second.p(), &th).unwrap();
        assert!((again[0] - th[0]).abs() < 1e-9);
    }

    #[test]
    fn setting3_without_external_info_matches_dstar_extended_setting2() {
        let d = small_sample();
        let d3 = d.project(Setting::Setting3).unwrap();
        let preds = Predictions {
            pi: vec![(0..15).map(|i| 0.4 + 0.02 * i as f64).collect()],
            ..Default::default()
        };
        let spec = SummarySpec::mean_of("x");
        let ext = ExternalSummary::scalar(0.3, 0.1, 0).unwrap();
        let r3 = estimate_el_with(&d3, &preds, &mean(), Some((&ext, &spec)), &[1.0], &ElOptions::default()).unwrap();
        // with no penalty the profiled tau makes the dstar constraint slack
        let r2 = estimate_el_with(&d, &preds, &mean(), None, &[1.0], &ElOptions::default()).unwrap();
        assert!((r3.theta_hat[0] - r2.theta_hat[0]).abs() < 1e-8);
    }

    #[test]
    fn setting3_requires_external_summary() {
        let d3 = small_sample().project(Setting::Setting3).unwrap();
        let preds = Predictions {
            pi: vec![vec![0.5; 15]],
            ..Default::default()
        };
        assert!(matches!(
            estimate_el_with(&d3, &preds, &mean(), None, &[1.0], &ElOptions::default()),
            Err(Error::Config(_))
        ));
    }
}
