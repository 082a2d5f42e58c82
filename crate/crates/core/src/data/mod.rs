//! Survey records, datasets and the two-step monotone missing pattern.
//!
//! A unit is first sampled (`delta`) with probability `1/w`, and a sampled unit
//! then responds (`r`). Datasets are stored in canonical order: the `m`
//! respondents first, then the `n - m` sampled nonrespondents, then (Setting 1
//! only) the `N - n` unsampled units. Estimators rely on this ordering to align
//! weight vectors defined over different subsets of units.

mod io;

pub use io::{load_dataset, load_raw, save_dataset, ColumnSchema, LoadOptions};

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Which covariate information is available for unsampled units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Setting {
    /// `x` observed for all `N` population units.
    Setting1,
    /// Only the sampled units are observed; `N` is known.
    Setting2,
    /// As Setting 2, plus a summary statistic from an external source.
    Setting3,
}

impl Setting {
    pub fn number(self) -> u8 {
        match self {
            Setting::Setting1 => 1,
            Setting::Setting2 => 2,
            Setting::Setting3 => 3,
        }
    }

    /// Settings 2 and 3 only materialize sampled units.
    pub fn stores_unsampled(self) -> bool {
        matches!(self, Setting::Setting1)
    }
}

impl TryFrom<u8> for Setting {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Setting::Setting1),
            2 => Ok(Setting::Setting2),
            3 => Ok(Setting::Setting3),
            other => Err(format!("unknown setting {other}; expected 1, 2 or 3")),
        }
    }
}

impl From<Setting> for u8 {
    fn from(s: Setting) -> u8 {
        s.number()
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Setting {}", self.number())
    }
}

/// One population or sampled unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    /// Covariates; required for every stored unit.
    pub x: Option<Vec<f64>>,
    /// Auxiliary covariates, observed only for sampled units.
    pub z: Option<Vec<f64>>,
    /// Sampling weight (inverse inclusion probability); observed for sampled units.
    pub w: Option<f64>,
    /// Outcome; observed iff `delta && r`.
    pub y: Option<f64>,
    pub delta: bool,
    pub r: bool,
}

impl UnitRecord {
    /// A fully observed respondent.
    pub fn respondent(x: Vec<f64>, z: Vec<f64>, w: f64, y: f64) -> Self {
        UnitRecord {
            x: Some(x),
            z: Some(z),
            w: Some(w),
            y: Some(y),
            delta: true,
            r: true,
        }
    }

    /// A sampled unit whose outcome is missing.
    pub fn nonrespondent(x: Vec<f64>, z: Vec<f64>, w: f64) -> Self {
        UnitRecord {
            x: Some(x),
            z: Some(z),
            w: Some(w),
            y: None,
            delta: true,
            r: false,
        }
    }

    /// An unsampled unit, of which only `x` is known.
    pub fn unsampled(x: Vec<f64>) -> Self {
        UnitRecord {
            x: Some(x),
            z: None,
            w: None,
            y: None,
            delta: false,
            r: false,
        }
    }

    pub fn is_respondent(&self) -> bool {
        self.delta && self.r
    }

    pub fn x(&self) -> &[f64] {
        self.x.as_deref().unwrap_or(&[])
    }

    pub fn z(&self) -> &[f64] {
        self.z.as_deref().unwrap_or(&[])
    }

    /// Sampling weight, `NaN` when unobserved.
    pub fn weight(&self) -> f64 {
        self.w.unwrap_or(f64::NAN)
    }

    /// Outcome, `NaN` when unobserved.
    pub fn outcome(&self) -> f64 {
        self.y.unwrap_or(f64::NAN)
    }

    fn block(&self) -> u8 {
        match (self.delta, self.r) {
            (true, true) => 0,
            (true, false) => 1,
            _ => 2,
        }
    }
}

/// A survey dataset in canonical order.
///
/// Immutable once constructed through [`SurveyDataset::new`]; use
/// [`SurveyDataset::raw`] to hold unchecked data for [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyDataset {
    units: Vec<UnitRecord>,
    population_size: usize,
    setting: Setting,
    x_names: Vec<String>,
    z_names: Vec<String>,
    n_sampled: usize,
    n_respondents: usize,
}

impl SurveyDataset {
    /// Validates and canonically orders `units`.
    ///
    /// In Settings 2 and 3 any unsampled rows are dropped, since only their
    /// count (carried by `population_size`) is observable.
    pub fn new(
        units: Vec<UnitRecord>,
        population_size: usize,
        setting: Setting,
        x_names: Vec<String>,
        z_names: Vec<String>,
    ) -> Result<Self> {
        let units = if setting.stores_unsampled() {
            units
        } else {
            units.into_iter().filter(|u| u.delta).collect()
        };
        let raw = SurveyDataset::raw(units, population_size, setting, x_names, z_names);
        let report = validate(&raw);
        if let Some(v) = report.violations.first() {
            return Err(match v.row {
                Some(row) => Error::InvalidRow {
                    row,
                    message: v.message.clone(),
                },
                None => Error::InvalidData(v.message.clone()),
            });
        }
        Ok(raw.into_canonical())
    }

    /// Wraps units without any checks or reordering.
    pub fn raw(
        units: Vec<UnitRecord>,
        population_size: usize,
        setting: Setting,
        x_names: Vec<String>,
        z_names: Vec<String>,
    ) -> Self {
        let n_sampled = units.iter().filter(|u| u.delta).count();
        let n_respondents = units.iter().filter(|u| u.is_respondent()).count();
        SurveyDataset {
            units,
            population_size,
            setting,
            x_names,
            z_names,
            n_sampled,
            n_respondents,
        }
    }

    fn into_canonical(mut self) -> Self {
        // sort_by_key is stable, so file order is kept within each block
        self.units.sort_by_key(UnitRecord::block);
        self
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    /// The `m` respondents.
    pub fn respondents(&self) -> &[UnitRecord] {
        &self.units[..self.n_respondents]
    }

    /// The `n` sampled units, respondents first.
    pub fn sampled(&self) -> &[UnitRecord] {
        &self.units[..self.n_sampled]
    }

    pub fn setting(&self) -> Setting {
        self.setting
    }

    pub fn population_size(&self) -> usize {
        self.population_size
    }

    /// `m`
    pub fn n_respondents(&self) -> usize {
        self.n_respondents
    }

    /// `n`
    pub fn n_sampled(&self) -> usize {
        self.n_sampled
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    /// Re-expresses a Setting-1 dataset as Setting 2 or 3 by dropping the
    /// unsampled units.
    pub fn project(&self, setting: Setting) -> Result<SurveyDataset> {
        if setting == self.setting {
            return Ok(self.clone());
        }
        if !self.setting.stores_unsampled() && setting.stores_unsampled() {
            return Err(Error::InvalidData(format!(
                "cannot project {} data to {setting}: unsampled covariates are not available",
                self.setting
            )));
        }
        Ok(SurveyDataset {
            units: self.sampled().to_vec(),
            population_size: self.population_size,
            setting,
            x_names: self.x_names.clone(),
            z_names: self.z_names.clone(),
            n_sampled: self.n_sampled,
            n_respondents: self.n_respondents,
        })
    }

    /// Builds a new dataset from unit indices into this one (e.g. a bootstrap
    /// resample), re-establishing canonical order.
    pub fn resample(&self, indices: &[usize]) -> SurveyDataset {
        let units: Vec<UnitRecord> = indices.iter().map(|&i| self.units[i].clone()).collect();
        let population_size = if self.setting.stores_unsampled() {
            units.len()
        } else {
            self.population_size
        };
        SurveyDataset::raw(
            units,
            population_size,
            self.setting,
            self.x_names.clone(),
            self.z_names.clone(),
        )
        .into_canonical()
    }

    /// Returns a copy with the covariate `x[index]` transformed by `f`.
    pub fn map_x(&self, index: usize, f: impl Fn(f64) -> f64) -> SurveyDataset {
        let mut out = self.clone();
        for u in &mut out.units {
            if let Some(x) = u.x.as_mut() {
                x[index] = f(x[index]);
            }
        }
        out
    }
}

/// One invariant violation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// 1-based position in the dataset's unit order, when row-specific.
    pub row: Option<usize>,
    pub message: String,
}

/// Result of [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub setting: Setting,
    pub population_size: usize,
    pub n_sampled: usize,
    pub n_respondents: usize,
    pub weight_min: Option<f64>,
    pub weight_max: Option<f64>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_usable(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "setting: {}", self.setting.number())?;
        writeln!(f, "N: {}", self.population_size)?;
        writeln!(f, "n: {}", self.n_sampled)?;
        writeln!(f, "m: {}", self.n_respondents)?;
        match (self.weight_min, self.weight_max) {
            (Some(lo), Some(hi)) => writeln!(f, "weight range: [{lo}, {hi}]")?,
            _ => writeln!(f, "weight range: none")?,
        }
        writeln!(f, "violations: {}", self.violations.len())?;
        for v in &self.violations {
            match v.row {
                Some(r) => writeln!(f, "  row {r}: {}", v.message)?,
                None => writeln!(f, "  {}", v.message)?,
            }
        }
        Ok(())
    }
}

/// Checks every dataset invariant and reports all violations found.
pub fn validate(data: &SurveyDataset) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |row: Option<usize>, message: String| violations.push(Violation { row, message });
    let px = data.x_names.len();
    let pz = data.z_names.len();
    let mut wmin = f64::INFINITY;
    let mut wmax = f64::NEG_INFINITY;

    for (i, u) in data.units.iter().enumerate() {
        let row = Some(i + 1);
        if u.r && !u.delta {
            push(row, format!("monotone pattern violated at row {}", i + 1));
        }
        match (u.y.is_some(), u.is_respondent()) {
            (true, false) => push(row, format!("y present without response at row {}", i + 1)),
            (false, true) => push(row, format!("y missing for respondent at row {}", i + 1)),
            _ => {}
        }
        if let Some(y) = u.y {
            if !y.is_finite() {
                push(row, format!("non-finite y at row {}", i + 1));
            }
        }
        match &u.x {
            None if data.setting == Setting::Setting1 => push(
                row,
                format!("x required for all units in Setting 1 (row {})", i + 1),
            ),
            None => push(row, format!("x required for sampled units (row {})", i + 1)),
            Some(x) if x.len() != px => push(
                row,
                format!("x has {} entries, expected {px} at row {}", x.len(), i + 1),
            ),
            Some(x) if x.iter().any(|v| !v.is_finite()) => {
                push(row, format!("non-finite x at row {}", i + 1))
            }
            _ => {}
        }
        if u.delta {
            match &u.z {
                None => push(row, format!("z required for sampled units (row {})", i + 1)),
                Some(z) if z.len() != pz => push(
                    row,
                    format!("z has {} entries, expected {pz} at row {}", z.len(), i + 1),
                ),
                Some(z) if z.iter().any(|v| !v.is_finite()) => {
                    push(row, format!("non-finite z at row {}", i + 1))
                }
                _ => {}
            }
            if u.w.is_none() {
                push(row, format!("weight missing for sampled unit at row {}", i + 1));
            }
        } else {
            if u.z.is_some() {
                push(row, format!("z present for unsampled unit at row {}", i + 1));
            }
            if !data.setting.stores_unsampled() {
                push(
                    row,
                    format!("unsampled unit stored in {} at row {}", data.setting, i + 1),
                );
            }
        }
        if let Some(w) = u.w {
            if !w.is_finite() {
                push(row, format!("non-finite weight at row {}", i + 1));
            } else {
                if w < 1.0 {
                    push(row, format!("weight below 1 at row {}", i + 1));
                }
                if u.delta {
                    wmin = wmin.min(w);
                    wmax = wmax.max(w);
                }
            }
        }
    }

    let n = data.n_sampled;
    let m = data.n_respondents;
    let big_n = data.population_size;
    if data.setting.stores_unsampled() && big_n != data.units.len() {
        push(
            None,
            format!(
                "Setting 1 requires N ({big_n}) to equal the number of rows ({})",
                data.units.len()
            ),
        );
    }
    if !(m <= n && n <= big_n) {
        push(None, format!("counts violate m <= n <= N (m={m}, n={n}, N={big_n})"));
    }

    let has_weights = wmin.is_finite();
    ValidationReport {
        setting: data.setting,
        population_size: big_n,
        n_sampled: n,
        n_respondents: m,
        weight_min: has_weights.then_some(wmin),
        weight_max: has_weights.then_some(wmax),
        violations,
    }
}

/// Summary statistic `(tau_tilde, sigma1_tilde, n1)` from an external source.
///
/// `sigma1_tilde` estimates the asymptotic variance of `sqrt(n1) (tau_tilde - tau)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalSummary {
    tau_tilde: Vec<f64>,
    sigma1_tilde: DMatrix<f64>,
    sigma1_inv: DMatrix<f64>,
    n1: usize,
}

impl ExternalSummary {
    pub fn new(tau_tilde: Vec<f64>, sigma1_tilde: DMatrix<f64>, n1: usize) -> Result<Self> {
        let d = tau_tilde.len();
        if sigma1_tilde.nrows() != d || sigma1_tilde.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: sigma1_tilde.nrows(),
                context: "external summary: sigma1 must be square with the dimension of tau".into(),
            });
        }
        if tau_tilde.iter().chain(sigma1_tilde.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("external summary contains non-finite values".into()));
        }
        let asym = (&sigma1_tilde - sigma1_tilde.transpose()).amax();
        if asym > 1e-10 * (1.0 + sigma1_tilde.amax()) {
            return Err(Error::InvalidData("external sigma1 is not symmetric".into()));
        }
        let chol = sigma1_tilde.clone().cholesky().ok_or_else(|| {
            Error::NonIdentifiable("external sigma1 is singular or not positive definite".into())
        })?;
        let sigma1_inv = chol.inverse();
        Ok(ExternalSummary {
            tau_tilde,
            sigma1_tilde,
            sigma1_inv,
            n1,
        })
    }

    pub fn scalar(tau: f64, sigma1: f64, n1: usize) -> Result<Self> {
        ExternalSummary::new(vec![tau], DMatrix::from_element(1, 1, sigma1), n1)
    }

    pub fn tau_tilde(&self) -> &[f64] {
        &self.tau_tilde
    }

    pub fn sigma1_tilde(&self) -> &DMatrix<f64> {
        &self.sigma1_tilde
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    /// Gradient of [`ExternalSummary::penalty`] in `tau`.
    pub fn penalty_gradient(&self, tau: &[f64]) -> Vec<f64> {
        if self.n1 == 0 {
            return vec![0.0; tau.len()];
        }
        let diff = nalgebra::DVector::from_iterator(
            tau.len(),
            self.tau_tilde.iter().zip(tau).map(|(a, b)| b - a),
        );
        (&self.sigma1_inv * diff * self.n1 as f64).iter().copied().collect()
    }

    /// `(n1 / 2) (tau_tilde - tau)' sigma1^{-1} (tau_tilde - tau)`
    pub fn penalty(&self, tau: &[f64]) -> f64 {
        if self.n1 == 0 {
            return 0.0;
        }
        let diff = nalgebra::DVector::from_iterator(
            tau.len(),
            self.tau_tilde.iter().zip(tau).map(|(a, b)| a - b),
        );
        0.5 * self.n1 as f64 * (diff.transpose() * &self.sigma1_inv * &diff)[(0, 0)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn four_units() -> Vec<UnitRecord> {
        vec![
            UnitRecord::unsampled(vec![0.3]),
            UnitRecord::nonrespondent(vec![0.1], vec![1.0], 3.0),
            UnitRecord::respondent(vec![0.2], vec![2.0], 2.0, 5.0),
            UnitRecord::unsampled(vec![0.4]),
        ]
    }

    #[test]
    fn canonical_order_is_stable_by_block() {
        let ds = SurveyDataset::new(four_units(), 4, Setting::Setting1, names(&["x"]), names(&["z"]))
            .unwrap();
        assert_eq!((ds.n_respondents(), ds.n_sampled(), ds.population_size()), (1, 2, 4));
        let xs: Vec<f64> = ds.units().iter().map(|u| u.x()[0]).collect();
        assert_eq!(xs, vec![0.2, 0.1, 0.3, 0.4]);
    }

    #[test]
    fn monotone_violation_names_row() {
        let mut units = four_units();
        units[0].r = true;
        let err = SurveyDataset::new(units, 4, Setting::Setting1, names(&["x"]), names(&["z"]))
            .unwrap_err();
        assert_eq!(
            err,
            Error::InvalidRow {
                row: 1,
                message: "monotone pattern violated at row 1".into()
            }
        );
    }

    #[test]
    fn report_flags_low_weight_and_missing_x() {
        let mut units = four_units();
        units[1].w = Some(0.5);
        units[3].x = None;
        let raw = SurveyDataset::raw(units, 4, Setting::Setting1, names(&["x"]), names(&["z"]));
        let report = validate(&raw);
        let msgs: Vec<&str> = report.violations.iter().map(|v| v.message.as_str()).collect();
        assert!(msgs.contains(&"weight below 1 at row 2"));
        assert!(msgs.contains(&"x required for all units in Setting 1 (row 4)"));
        assert_eq!(report.violations.len(), 2);
        assert!(!report.is_usable());
    }

    #[test]
    fn clean_dataset_has_no_violations() {
        let raw = SurveyDataset::raw(four_units(), 4, Setting::Setting1, names(&["x"]), names(&["z"]));
        let report = validate(&raw);
        assert!(report.is_usable(), "{report}");
        assert_eq!(report.weight_min, Some(2.0));
        assert_eq!(report.weight_max, Some(3.0));
    }

    #[test]
    fn weight_of_one_is_accepted() {
        let units = vec![UnitRecord::respondent(vec![0.0], vec![0.0], 1.0, 1.0)];
        assert!(SurveyDataset::new(units, 1, Setting::Setting1, names(&["x"]), names(&["z"])).is_ok());
    }

    #[test]
    fn projection_drops_unsampled() {
        let ds = SurveyDataset::new(four_units(), 4, Setting::Setting1, names(&["x"]), names(&["z"]))
            .unwrap();
        let s2 = ds.project(Setting::Setting2).unwrap();
        assert_eq!(s2.units().len(), 2);
        assert_eq!(s2.population_size(), 4);
        assert!(validate(&s2).is_usable());
        assert!(s2.project(Setting::Setting1).is_err());
    }

    #[test]
    fn n_must_not_exceed_population() {
        let units = vec![
            UnitRecord::respondent(vec![0.0], vec![0.0], 2.0, 1.0),
            UnitRecord::nonrespondent(vec![0.0], vec![0.0], 2.0),
        ];
        let err = SurveyDataset::new(units, 1, Setting::Setting2, names(&["x"]), names(&["z"]))
            .unwrap_err();
        assert!(matches!(err, Error::InvalidData(_)));
    }

    #[test]
    fn external_summary_checks() {
        assert!(ExternalSummary::scalar(0.0, 0.0, 10).is_err());
        assert!(ExternalSummary::new(vec![0.0, 1.0], DMatrix::identity(1, 1), 10).is_err());
        let ext = ExternalSummary::scalar(1.0, 2.0, 10).unwrap();
        assert!((ext.penalty(&[0.0]) - 2.5).abs() < 1e-15);
        let none = ExternalSummary::scalar(1.0, 2.0, 0).unwrap();
        assert_eq!(none.penalty(&[0.0]), 0.0);
    }
}
