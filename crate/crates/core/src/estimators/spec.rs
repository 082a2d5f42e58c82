//! Estimator identifiers, the working-model catalog, and fitted estimation.
//!
//! Identifiers follow the simulation grid: `HT1`, `KH10`, `MM11`, `EL10|10`,
//! with optional setting suffixes `@S2` / `@S3` and the Setting 3 marker
//! `^(N1)` (e.g. `EL10|10^(10000)`). Underscores and braces are ignored, so
//! `EL_{10|10}^{(10000)}` parses too.
//!
//! Digits name catalog models. For HT/KH/MM a `1` is model 1 (correct) and a
//! `0` is model 2. For EL the two-digit groups `10` and `00` expand to the
//! model pairs (1, 2) and (2, 3); any other group is read digit by digit as
//! literal model numbers, so `EL13|13` uses models 1 and 3 on both sides.

use super::el::{estimate_el_with, ElOptions};
use super::summary::SummarySpec;
use super::{estimate_ht_with, estimate_kh_with, estimate_mm_with, CTerm, EstimateResult, Predictions};
use crate::data::{ExternalSummary, Setting, SurveyDataset};
use crate::estimand::{solve_weighted_estimating_equation, EqTerm, Estimand};
use crate::error::{Error, Result};
use crate::models::{
    fit_c_model, fit_outcome_ls, fit_response_mle, BasisSpec, CForm, CModel, OutcomeModel, ResponseModel,
};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    HT,
    KH,
    MM,
    EL,
}

/// A parsed estimator identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EstimatorSpec {
    pub method: Method,
    /// 1-based response model numbers.
    pub response: Vec<usize>,
    /// 1-based outcome model numbers.
    pub outcome: Vec<usize>,
    /// `None` means "use the dataset's setting".
    pub setting: Option<Setting>,
    /// External sample size written into the identifier, if numeric.
    pub n1: Option<usize>,
    label: String,
}

fn bad_id(id: &str, why: &str) -> Error {
    Error::Config(format!("unknown estimator id `{id}`: {why}"))
}

fn digits(s: &str, id: &str) -> Result<Vec<usize>> {
    s.chars()
        .map(|c| c.to_digit(10).map(|d| d as usize).ok_or_else(|| bad_id(id, "expected digits")))
        .collect()
}

fn single(d: usize) -> usize {
    if d == 0 {
        2
    } else {
        d
    }
}

fn el_group(s: &str, id: &str) -> Result<Vec<usize>> {
    let models = match s {
        "10" => vec![1, 2],
        "00" => vec![2, 3],
        _ => digits(s, id)?,
    };
    if models.contains(&0) {
        return Err(bad_id(id, "model 0 is only meaningful in the groups `10` and `00`"));
    }
    let mut sorted = models.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != models.len() {
        return Err(bad_id(id, "a model is listed twice"));
    }
    Ok(models)
}

impl EstimatorSpec {
    pub fn parse(id: &str) -> Result<Self> {
        let mut s: String = id.chars().filter(|c| !matches!(c, '_' | '{' | '}' | ' ')).collect();
        let mut setting = None;
        let mut n1 = None;
        if let Some(start) = s.find("^(") {
            let end = s[start..].find(')').ok_or_else(|| bad_id(id, "unclosed `^(`"))? + start;
            let inner = &s[start + 2..end];
            if inner != "N1" {
                n1 = Some(inner.parse::<usize>().map_err(|_| bad_id(id, "`^(..)` must hold N1 or a count"))?);
            }
            setting = Some(Setting::Setting3);
            s.replace_range(start..=end, "");
        }
        if let Some(at) = s.find('@') {
            let suffix = s[at + 1..].to_string();
            let st = match suffix.as_str() {
                "S1" => Setting::Setting1,
                "S2" => Setting::Setting2,
                "S3" => Setting::Setting3,
                _ => return Err(bad_id(id, "setting suffix must be @S1, @S2 or @S3")),
            };
            if setting.is_some() && st != Setting::Setting3 {
                return Err(bad_id(id, "`^(N1)` implies Setting 3"));
            }
            setting = Some(st);
            s.truncate(at);
        }
        if s.len() < 2 || !s.is_char_boundary(2) {
            return Err(bad_id(id, "too short"));
        }
        let (head, rest) = s.split_at(2);
        let method = match head {
            "HT" => Method::HT,
            "KH" => Method::KH,
            "MM" => Method::MM,
            "EL" => Method::EL,
            _ => return Err(bad_id(id, "method must be HT, KH, MM or EL")),
        };
        let (response, outcome) = match method {
            Method::HT => {
                let d = digits(rest, id)?;
                if d.len() != 1 {
                    return Err(bad_id(id, "HT takes one model digit"));
                }
                (vec![single(d[0])], vec![])
            }
            Method::KH | Method::MM => {
                let d = digits(rest, id)?;
                if d.len() != 2 {
                    return Err(bad_id(id, "KH and MM take two model digits"));
                }
                (vec![single(d[0])], vec![single(d[1])])
            }
            Method::EL => {
                let (a, b) = rest.split_once('|').ok_or_else(|| bad_id(id, "EL needs `response|outcome` groups"))?;
                let (a, b) = (el_group(a, id)?, el_group(b, id)?);
                if a.is_empty() && b.is_empty() {
                    return Err(bad_id(id, "EL needs at least one working model"));
                }
                (a, b)
            }
        };
        if method != Method::EL && setting == Some(Setting::Setting3) {
            return Err(bad_id(id, "only EL supports Setting 3"));
        }
        if method == Method::MM && setting == Some(Setting::Setting3) {
            return Err(bad_id(id, "MM is defined for Settings 1 and 2"));
        }
        Ok(EstimatorSpec {
            method,
            response,
            outcome,
            setting,
            n1,
            label: id.to_string(),
        })
    }

    /// The same estimator pinned to `setting`, keeping its label.
    pub fn in_setting(&self, setting: Setting) -> Self {
        EstimatorSpec {
            setting: Some(setting),
            ..self.clone()
        }
    }

    /// The identifier as originally written.
    pub fn label(&self) -> &str {
        &self.label
    }
}

impl FromStr for EstimatorSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EstimatorSpec::parse(s)
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl Serialize for EstimatorSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label)
    }
}

impl<'de> Deserialize<'de> for EstimatorSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        EstimatorSpec::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Candidate working models, numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCatalog {
    pub response: Vec<BasisSpec>,
    pub outcome: Vec<BasisSpec>,
    /// Basis of `kappa(x)` for Setting 1.
    pub cfun: BasisSpec,
}

impl Default for ModelCatalog {
    /// The simulation catalog over covariates `x`, `z` and weight `w`.
    fn default() -> Self {
        let b = |t: &[&str]| BasisSpec::parse(t).expect("static basis");
        ModelCatalog {
            response: vec![
                b(&["1", "x", "z", "w"]),
                b(&["1", "x", "z", "x*z"]),
                b(&["1", "s3(x)", "s3(z)", "s3(logwm1)"]),
            ],
            outcome: vec![
                b(&["1", "x", "z", "logwm1"]),
                b(&["1", "x", "z", "x*z"]),
                b(&["1", "s3(x)", "s3(z)", "s3(w)"]),
            ],
            cfun: b(&["1", "x"]),
        }
    }
}

impl ModelCatalog {
    fn pick<'a>(list: &'a [BasisSpec], idx: usize, what: &str) -> Result<&'a BasisSpec> {
        list.get(idx.wrapping_sub(1)).ok_or_else(|| {
            Error::Config(format!("{what} model {idx} is not in the catalog ({} defined)", list.len()))
        })
    }

    /// Checks that every model an estimator names exists.
    pub fn check(&self, spec: &EstimatorSpec) -> Result<()> {
        for &j in &spec.response {
            Self::pick(&self.response, j, "response")?;
        }
        for &k in &spec.outcome {
            Self::pick(&self.outcome, k, "outcome")?;
        }
        Ok(())
    }
}

/// Fitted working models for one estimator call.
#[derive(Debug, Clone)]
pub struct WorkingModelSet {
    pub response: Vec<ResponseModel>,
    pub outcome: Vec<OutcomeModel>,
    pub cfun: Vec<CModel>,
}

impl WorkingModelSet {
    pub fn predict(&self, data: &SurveyDataset) -> Result<Predictions> {
        let s = data.sampled();
        let pi = self.response.iter().map(|r| r.predict_many(s)).collect::<Result<_>>()?;
        let m = self.outcome.iter().map(|o| o.predict_many(s)).collect::<Result<_>>()?;
        let c = self
            .cfun
            .iter()
            .map(|c| match c.support() {
                Some(sp) => Ok(CTerm::Constant(sp.to_vec())),
                None => c.predict_many(data.units()).map(CTerm::PerUnit),
            })
            .collect::<Result<_>>()?;
        Ok(Predictions { pi, m, c })
    }
}

/// Fits the models named by `spec` on `data` (already in the target setting).
pub fn fit_working_models(data: &SurveyDataset, spec: &EstimatorSpec, catalog: &ModelCatalog) -> Result<WorkingModelSet> {
    catalog.check(spec)?;
    let response = spec
        .response
        .iter()
        .map(|&j| fit_response_mle(data, ModelCatalog::pick(&catalog.response, j, "response")?))
        .collect::<Result<_>>()?;
    let outcome = spec
        .outcome
        .iter()
        .map(|&k| fit_outcome_ls(data, ModelCatalog::pick(&catalog.outcome, k, "outcome")?))
        .collect::<Result<_>>()?;
    let s1 = data.setting() == Setting::Setting1;
    let cfun = match spec.method {
        Method::MM if s1 => vec![fit_c_model(data, &catalog.cfun, CForm::FunctionOfX)?],
        Method::MM => vec![fit_c_model(data, &catalog.cfun, CForm::Constant)?],
        Method::EL if s1 => vec![fit_c_model(data, &catalog.cfun, CForm::FunctionOfX)?],
        _ => vec![],
    };
    Ok(WorkingModelSet { response, outcome, cfun })
}

/// Respondent-weighted starting value: HT under the first response model,
/// or the W-weighted respondent solution when there is none.
fn initial_theta(data: &SurveyDataset, preds: &Predictions, e: &Estimand) -> Result<Vec<f64>> {
    if let Some(pi) = preds.pi.first() {
        return estimate_ht_with(data, pi, e).map(|r| r.theta_hat);
    }
    let terms: Vec<EqTerm<'_>> = data
        .respondents()
        .iter()
        .map(|u| EqTerm::new(u.weight(), u.x(), u.outcome()))
        .collect();
    solve_weighted_estimating_equation(e, &terms, None, None)
}

/// Runs `spec` with already fitted models. `data` must be in the target setting.
pub fn estimate_fitted(
    data: &SurveyDataset,
    spec: &EstimatorSpec,
    models: &WorkingModelSet,
    e: &Estimand,
    ext: Option<(&ExternalSummary, &SummarySpec)>,
    opts: &ElOptions,
) -> Result<EstimateResult> {
    let preds = models.predict(data)?;
    let mut r = match spec.method {
        Method::HT => estimate_ht_with(data, &preds.pi[0], e)?,
        Method::KH => estimate_kh_with(data, &preds.pi[0], &preds.m[0], e)?,
        Method::MM => estimate_mm_with(data, &preds.pi[0], &preds.m[0], &preds.c[0], e)?,
        Method::EL => {
            if let (Some(n1), Some((x, _))) = (spec.n1, ext) {
                if n1 != x.n1() {
                    return Err(Error::Config(format!(
                        "estimator {spec} names N1 = {n1} but the external summary has N1 = {}",
                        x.n1()
                    )));
                }
            }
            let init = initial_theta(data, &preds, e)?;
            estimate_el_with(data, &preds, e, ext, &init, opts)?
        }
    };
    r.estimator_id = spec.label().to_string();
    Ok(r)
}

/// Fits the working models and runs `spec`, projecting `data` to the
/// estimator's setting first when one is given.
pub fn estimate(
    data: &SurveyDataset,
    spec: &EstimatorSpec,
    catalog: &ModelCatalog,
    e: &Estimand,
    ext: Option<(&ExternalSummary, &SummarySpec)>,
    opts: &ElOptions,
) -> Result<EstimateResult> {
    let projected;
    let data = match spec.setting {
        Some(s) if s != data.setting() => {
            projected = data.project(s)?;
            &projected
        }
        _ => data,
    };
    if spec.method == Method::MM && data.setting() == Setting::Setting3 {
        return Err(Error::Config("MM is defined for Settings 1 and 2".into()));
    }
    let models = fit_working_models(data, spec, catalog)?;
    estimate_fitted(data, spec, &models, e, ext, opts)
}
