//! Nuisance working models: logistic response models, outcome regressions
//! and C-function fits.

mod basis;

pub use basis::{build_design, Basis, BasisSpec, TermSpec, Var};

use crate::data::{SurveyDataset, UnitRecord};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Numerically stable logistic function.
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))` without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

const IRLS_MAX_ITER: usize = 100;
const IRLS_GRAD_TOL: f64 = 1e-8;
const SEPARATION_ETA: f64 = 35.0;

/// Fitted logistic response model `P(R = 1 | x, z, w, delta = 1)`.
#[derive(Debug, Clone)]
pub struct ResponseModel {
    spec: BasisSpec,
    basis: Basis,
    alpha: DVector<f64>,
    covariance: DMatrix<f64>,
    log_likelihood: f64,
    loglik_trace: Vec<f64>,
    iterations: usize,
}

impl ResponseModel {
    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }
    pub fn basis(&self) -> &Basis {
        &self.basis
    }
    pub fn alpha(&self) -> &[f64] {
        self.alpha.as_slice()
    }
    /// Inverse observed Fisher information at the estimate.
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.alpha.len())
            .map(|j| self.covariance[(j, j)].sqrt())
            .collect()
    }
    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }
    /// Log-likelihood at the start of each IRLS iteration and at the end.
    pub fn loglik_trace(&self) -> &[f64] {
        &self.loglik_trace
    }
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn predict(&self, unit: &UnitRecord, row: usize) -> Result<f64> {
        let x = self.basis.row(unit, row)?;
        let eta: f64 = x.iter().zip(self.alpha.iter()).map(|(a, b)| a * b).sum();
        Ok(expit(eta))
    }

    pub fn predict_many(&self, units: &[UnitRecord]) -> Result<Vec<f64>> {
        let d = self.basis.design(units)?;
        Ok((d * &self.alpha).iter().map(|&e| expit(e)).collect())
    }
}

fn logistic_loglik(x: &DMatrix<f64>, r: &[f64], alpha: &DVector<f64>) -> f64 {
    let eta = x * alpha;
    eta.iter().zip(r).map(|(&e, &ri)| ri * e - softplus(e)).sum()
}

fn solve_spd(h: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(b));
    }
    let mut hr = h.clone();
    for j in 0..hr.nrows() {
        hr[(j, j)] += 1e-8;
    }
    hr.cholesky().map(|ch| ch.solve(b))
}

fn invert_spd(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = h.nrows();
    let id = DMatrix::identity(n, n);
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(&id));
    }
    let mut hr = h.clone();
    for j in 0..n {
        hr[(j, j)] += 1e-8;
    }
    hr.cholesky().map(|ch| ch.solve(&id))
}

/// Maximum-likelihood logistic fit of `r` on the basis over the sampled units.
pub fn fit_response_mle(data: &SurveyDataset, spec: &BasisSpec) -> Result<ResponseModel> {
    let units = data.sampled();
    let (basis, x) = build_design(spec, data, units)?;
    let r: Vec<f64> = units.iter().map(|u| if u.r { 1.0 } else { 0.0 }).collect();
    let (alpha, covariance, log_likelihood, loglik_trace, iterations) = irls(&x, &r)?;
    Ok(ResponseModel {
        spec: spec.clone(),
        basis,
        alpha,
        covariance,
        log_likelihood,
        loglik_trace,
        iterations,
    })
}

type IrlsFit = (DVector<f64>, DMatrix<f64>, f64, Vec<f64>, usize);

fn irls(x: &DMatrix<f64>, r: &[f64]) -> Result<IrlsFit> {
    let n = x.nrows();
    let p = x.ncols();
    let ones = r.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == n {
        return Err(Error::Separation);
    }
    let mut alpha = DVector::zeros(p);
    let mut ll = logistic_loglik(x, r, &alpha);
    let mut trace = vec![ll];
    for iter in 0..IRLS_MAX_ITER {
        let eta = x * &alpha;
        if eta.iter().any(|e| e.abs() > SEPARATION_ETA) {
            return Err(Error::Separation);
        }
        let mu: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let resid = DVector::from_iterator(n, r.iter().zip(&mu).map(|(ri, mi)| ri - mi));
        let grad = x.tr_mul(&resid);
        let mut xw = x.clone();
        for i in 0..n {
            let s = (mu[i] * (1.0 - mu[i])).sqrt();
            xw.row_mut(i).scale_mut(s);
        }
        let h = xw.tr_mul(&xw);
        if grad.amax() < IRLS_GRAD_TOL {
            let cov = invert_spd(&h).ok_or(Error::Separation)?;
            return Ok((alpha, cov, ll, trace, iter));
        }
        let step = solve_spd(&h, &grad)
            .ok_or_else(|| Error::NonIdentifiable("singular information matrix in logistic fit".into()))?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &alpha + &step * t;
            let ll_c = logistic_loglik(x, r, &cand);
            if ll_c.is_finite() && ll_c >= ll - 1e-12 * ll.abs().max(1.0) {
                alpha = cand;
                ll = ll_c.max(ll);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::no_convergence("logistic IRLS", iter + 1, grad.amax()));
        }
        trace.push(ll);
    }
    let eta = x * &alpha;
    let resid = DVector::from_iterator(n, r.iter().zip(eta.iter()).map(|(ri, &e)| ri - expit(e)));
    Err(Error::no_convergence(
        "logistic IRLS",
        IRLS_MAX_ITER,
        x.tr_mul(&resid).amax(),
    ))
}

/// Least-squares coefficients of `y` on `x`, optionally with row weights.
fn least_squares(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<DVector<f64>> {
    let mut a = x.clone();
    let mut b = DVector::from_column_slice(y);
    if let Some(w) = weights {
        for i in 0..a.nrows() {
            let s = w[i].sqrt();
            a.row_mut(i).scale_mut(s);
            b[i] *= s;
        }
    }
    let svd = a.svd(true, true);
    svd.solve(&b, 1e-13 * svd.singular_values.max())
        .map_err(|e| Error::NonIdentifiable(format!("least squares failed: {e}")))
}

/// Outcome regression `E(Y | x, z, w)` fitted on respondents.
#[derive(Debug, Clone)]
pub struct OutcomeModel {
    spec: BasisSpec,
    basis: Basis,
    beta: DVector<f64>,
}

impl OutcomeModel {
    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }
    pub fn basis(&self) -> &Basis {
        &self.basis
    }
    pub fn beta(&self) -> &[f64] {
        self.beta.as_slice()
    }
    pub fn predict(&self, unit: &UnitRecord, row: usize) -> Result<f64> {
        let x = self.basis.row(unit, row)?;
        Ok(x.iter().zip(self.beta.iter()).map(|(a, b)| a * b).sum())
    }
    pub fn predict_many(&self, units: &[UnitRecord]) -> Result<Vec<f64>> {
        let d = self.basis.design(units)?;
        Ok((d * &self.beta).iter().copied().collect())
    }
}

/// Ordinary least squares of `y` on the basis over respondents.
pub fn fit_outcome_ls(data: &SurveyDataset, spec: &BasisSpec) -> Result<OutcomeModel> {
    let units = data.respondents();
    let (basis, x) = build_design(spec, data, units)?;
    let y: Vec<f64> = units.iter().map(UnitRecord::outcome).collect();
    let beta = least_squares(&x, &y, None)?;
    Ok(OutcomeModel {
        spec: spec.clone(),
        basis,
        beta,
    })
}

/// Whether the C-function depends on `x` or is a single constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CForm {
    FunctionOfX,
    Constant,
}

/// One respondent carried by a constant C-function: normalized weight,
/// covariates and outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportPoint {
    pub weight: f64,
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone)]
enum CFit {
    FunctionOfX { basis: Basis, gamma: DVector<f64> },
    Constant { value: f64, support: Vec<SupportPoint> },
}

/// Fitted C-function `kappa(x)` (or constant) with weights `w(w-1)`.
#[derive(Debug, Clone)]
pub struct CModel {
    spec: BasisSpec,
    fit: CFit,
}

impl CModel {
    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn form(&self) -> CForm {
        match self.fit {
            CFit::FunctionOfX { .. } => CForm::FunctionOfX,
            CFit::Constant { .. } => CForm::Constant,
        }
    }

    pub fn gamma(&self) -> Vec<f64> {
        match &self.fit {
            CFit::FunctionOfX { gamma, .. } => gamma.as_slice().to_vec(),
            CFit::Constant { value, .. } => vec![*value],
        }
    }

    /// Respondent support of a constant fit, with weights summing to one.
    pub fn support(&self) -> Option<&[SupportPoint]> {
        match &self.fit {
            CFit::Constant { support, .. } => Some(support),
            CFit::FunctionOfX { .. } => None,
        }
    }

    pub fn predict(&self, unit: &UnitRecord, row: usize) -> Result<f64> {
        match &self.fit {
            CFit::FunctionOfX { basis, gamma } => {
                let x = basis.row(unit, row)?;
                Ok(x.iter().zip(gamma.iter()).map(|(a, b)| a * b).sum())
            }
            CFit::Constant { value, .. } => Ok(*value),
        }
    }

    pub fn predict_many(&self, units: &[UnitRecord]) -> Result<Vec<f64>> {
        match &self.fit {
            CFit::FunctionOfX { basis, gamma } => {
                let d = basis.design(units)?;
                Ok((d * gamma).iter().copied().collect())
            }
            CFit::Constant { value, .. } => Ok(vec![*value; units.len()]),
        }
    }
}

/// Weighted least squares of `y` on an `x`-only basis over respondents with
/// weights `w(w-1)`. The constant form ignores `spec` beyond recording it
/// and returns the weighted mean.
pub fn fit_c_model(data: &SurveyDataset, spec: &BasisSpec, form: CForm) -> Result<CModel> {
    let units = data.respondents();
    let weights: Vec<f64> = units.iter().map(|u| u.weight() * (u.weight() - 1.0)).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidData(
            "C-function weights w(w-1) are all zero among respondents".into(),
        ));
    }
    let fit = match form {
        CForm::Constant => {
            let value = units
                .iter()
                .zip(&weights)
                .map(|(u, w)| w * u.outcome())
                .sum::<f64>()
                / total;
            let support = units
                .iter()
                .zip(&weights)
                .filter(|(_, &w)| w > 0.0)
                .map(|(u, &w)| SupportPoint {
                    weight: w / total,
                    x: u.x().to_vec(),
                    y: u.outcome(),
                })
                .collect();
            CFit::Constant { value, support }
        }
        CForm::FunctionOfX => {
            let (basis, x) = build_design(spec, data, units)?;
            if !basis.is_x_only() {
                return Err(Error::Config(format!(
                    "C-function basis {spec} must depend on x only"
                )));
            }
            let y: Vec<f64> = units.iter().map(UnitRecord::outcome).collect();
            let gamma = least_squares(&x, &y, Some(&weights))?;
            CFit::FunctionOfX { basis, gamma }
        }
    };
    Ok(CModel {
        spec: spec.clone(),
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Setting;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn ds(units: Vec<UnitRecord>) -> SurveyDataset {
        let n = units.len();
        SurveyDataset::new(units, n, Setting::Setting1, vec!["x".into()], vec!["z".into()]).unwrap()
    }

    fn spec(t: &[&str]) -> BasisSpec {
        BasisSpec::parse(t).unwrap()
    }

    #[test]
    fn expit_is_stable() {
        assert_eq!(expit(0.0), 0.5);
        assert!(expit(800.0) == 1.0 && expit(-800.0) >= 0.0);
        assert!((expit(2.0) + expit(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn intercept_only_logit_of_mean() {
        let units = vec![
            UnitRecord::respondent(vec![0.0], vec![0.0], 2.0, 1.0),
            UnitRecord::respondent(vec![0.0], vec![0.0], 2.0, 1.0),
            UnitRecord::respondent(vec![0.0], vec![0.0], 2.0, 1.0),
            UnitRecord::nonrespondent(vec![0.0], vec![0.0], 2.0),
        ];
        let fit = fit_response_mle(&ds(units), &BasisSpec::intercept()).unwrap();
        assert!((fit.alpha()[0] - 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn all_respond_is_separation() {
        let units = vec![
            UnitRecord::respondent(vec![0.0], vec![0.0], 2.0, 1.0),
            UnitRecord::respondent(vec![1.0], vec![0.0], 2.0, 1.0),
        ];
        assert_eq!(
            fit_response_mle(&ds(units), &BasisSpec::intercept()).unwrap_err(),
            Error::Separation
        );
    }

    #[test]
    fn perfectly_separated_covariate() {
        let mut units = Vec::new();
        for i in 0..10 {
            units.push(UnitRecord::respondent(vec![1.0 + i as f64], vec![0.0], 2.0, 0.0));
            units.push(UnitRecord::nonrespondent(vec![-1.0 - i as f64], vec![0.0], 2.0));
        }
        assert_eq!(
            fit_response_mle(&ds(units), &spec(&["1", "x"])).unwrap_err(),
            Error::Separation
        );
    }

    fn simulated(n: usize, seed: u64) -> SurveyDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nx = Normal::new(0.0, 0.5f64.sqrt()).unwrap();
        let mut units = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = nx.sample(&mut rng);
            let z: f64 = nx.sample(&mut rng);
            let y = x - z + nx.sample(&mut rng);
            let w = 1.0 + (2.95 - 0.25 * x - 0.45 * y - 0.1 * z + 0.05f64.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal)).exp();
            let p = expit(-0.3 + 0.75 * x - 0.5 * z + 0.05 * w);
            if rng.random::<f64>() < p {
                units.push(UnitRecord::respondent(vec![x], vec![z], w, y));
            } else {
                units.push(UnitRecord::nonrespondent(vec![x], vec![z], w));
            }
        }
        ds(units)
    }

    #[test]
    fn response_coefficients_recovered_within_three_se() {
        let data = simulated(4000, 11);
        let fit = fit_response_mle(&data, &spec(&["1", "x", "z", "w"])).unwrap();
        let truth = [-0.3, 0.75, -0.5, 0.05];
        let se = fit.standard_errors();
        for j in 0..4 {
            assert!(
                (fit.alpha()[j] - truth[j]).abs() < 3.0 * se[j],
                "coef {j}: {} vs {} (se {})",
                fit.alpha()[j],
                truth[j],
                se[j]
            );
        }
        let tr = fit.loglik_trace();
        assert!(tr.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    }

    #[test]
    fn outcome_intercept_and_exact_fit() {
        let units = vec![
            UnitRecord::respondent(vec![0.0], vec![0.0], 2.0, 1.0),
            UnitRecord::respondent(vec![1.0], vec![0.0], 2.0, 2.0),
            UnitRecord::respondent(vec![2.0], vec![0.0], 2.0, 3.0),
        ];
        let d = ds(units);
        let fit = fit_outcome_ls(&d, &BasisSpec::intercept()).unwrap();
        assert!((fit.beta()[0] - 2.0).abs() < 1e-12);
        let fit = fit_outcome_ls(&d, &spec(&["1", "x"])).unwrap();
        assert!((fit.beta()[0] - 1.0).abs() < 1e-10 && (fit.beta()[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn outcome_matches_normal_equations_and_residuals_are_orthogonal() {
        let data = simulated(800, 5);
        let sp = spec(&["1", "x", "z", "logwm1"]);
        let fit = fit_outcome_ls(&data, &sp).unwrap();
        let resp = data.respondents();
        let x = fit.basis().design(resp).unwrap();
        let y = DVector::from_iterator(resp.len(), resp.iter().map(|u| u.outcome()));
        let beta_ne = (x.tr_mul(&x)).lu().solve(&x.tr_mul(&y)).unwrap();
        for j in 0..4 {
            assert!((beta_ne[j] - fit.beta()[j]).abs() < 1e-9);
        }
        let resid = &y - &x * DVector::from_column_slice(fit.beta());
        assert!(x.tr_mul(&resid).amax() < 1e-8);
    }

    #[test]
    fn constant_c_is_weighted_mean() {
        let units = vec![
            UnitRecord::respondent(vec![0.0], vec![0.0], 2.0, 1.0),
            UnitRecord::respondent(vec![1.0], vec![0.0], 3.0, 2.0),
        ];
        let c = fit_c_model(&ds(units), &BasisSpec::intercept(), CForm::Constant).unwrap();
        assert!((c.gamma()[0] - 1.75).abs() < 1e-15);
        // a weighted normal equation on the intercept gives the same value
        let w = [2.0, 6.0];
        let (xtwx, xtwy) = (w[0] + w[1], w[0] * 1.0 + w[1] * 2.0);
        assert!((xtwy / xtwx - c.gamma()[0]).abs() < 1e-15);
        let s = c.support().unwrap();
        assert!((s[0].weight - 0.25).abs() < 1e-15 && (s[1].weight - 0.75).abs() < 1e-15);
    }

    #[test]
    fn c_weights_all_zero_rejected() {
        let units = vec![UnitRecord::respondent(vec![0.0], vec![0.0], 1.0, 1.0)];
        assert!(fit_c_model(&ds(units), &BasisSpec::intercept(), CForm::Constant).is_err());
    }

    #[test]
    fn c_with_equal_weights_is_ols() {
        let units: Vec<_> = (0..6)
            .map(|i| UnitRecord::respondent(vec![i as f64], vec![0.0], 3.0, (i * i) as f64))
            .collect();
        let d = ds(units);
        let c = fit_c_model(&d, &spec(&["1", "x"]), CForm::FunctionOfX).unwrap();
        let o = fit_outcome_ls(&d, &spec(&["1", "x"])).unwrap();
        for j in 0..2 {
            assert!((c.gamma()[j] - o.beta()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn c_basis_must_be_x_only() {
        let units: Vec<_> = (0..6)
            .map(|i| UnitRecord::respondent(vec![i as f64], vec![(i % 2) as f64], 3.0, 1.0))
            .collect();
        assert!(matches!(
            fit_c_model(&ds(units), &spec(&["1", "z"]), CForm::FunctionOfX),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn affine_rescaling_keeps_predictions(a in 0.2f64..5.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let data = simulated(300, seed);
            let scaled = data.map_x(0, |x| a * x + b);
            let sp = spec(&["1", "s3(x)", "z", "w"]);
            let r0 = fit_response_mle(&data, &sp).unwrap().predict_many(data.units()).unwrap();
            let r1 = fit_response_mle(&scaled, &sp).unwrap().predict_many(scaled.units()).unwrap();
            let o0 = fit_outcome_ls(&data, &sp).unwrap().predict_many(data.units()).unwrap();
            let o1 = fit_outcome_ls(&scaled, &sp).unwrap().predict_many(scaled.units()).unwrap();
            let cs = spec(&["1", "s3(x)"]);
            let c0 = fit_c_model(&data, &cs, CForm::FunctionOfX).unwrap().predict_many(data.units()).unwrap();
            let c1 = fit_c_model(&scaled, &cs, CForm::FunctionOfX).unwrap().predict_many(scaled.units()).unwrap();
            for i in 0..r0.len() {
                prop_assert!((r0[i] - r1[i]).abs() < 1e-8);
                prop_assert!((o0[i] - o1[i]).abs() < 1e-8);
                prop_assert!((c0[i] - c1[i]).abs() < 1e-8);
            }
        }

        #[test]
        fn irls_loglik_non_decreasing(seed in 0u64..1000) {
            let data = simulated(200, seed);
            let fit = fit_response_mle(&data, &spec(&["1", "x", "z", "x*z"])).unwrap();
            let tr = fit.loglik_trace();
            prop_assert!(tr.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        }
    }
}
