//! Term lists and design matrices for the working models.
//!
//! A [`BasisSpec`] is the unresolved term list given in configuration, e.g.
//! `["1", "x", "z", "x*z"]` or `["1", "s3(x)", "s3(logwm1)"]`. Resolving it
//! against fitting data fixes variable indices and spline knots, giving a
//! [`Basis`] that can evaluate rows for any unit.

use crate::data::{SurveyDataset, UnitRecord};
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;

/// One unresolved term.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TermSpec {
    Intercept,
    Raw(String),
    Interaction(String, String),
    /// `log(w - 1)`
    LogWm1,
    /// Natural cubic spline with three degrees of freedom.
    Spline3(String),
}

impl TermSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if s == "1" {
            return Ok(TermSpec::Intercept);
        }
        if is_logwm1(&s) {
            return Ok(TermSpec::LogWm1);
        }
        if let Some(inner) = s.strip_prefix("s3(").and_then(|r| r.strip_suffix(')')) {
            if inner.is_empty() {
                return Err(Error::Config(format!("empty spline term `{s}`")));
            }
            return Ok(TermSpec::Spline3(inner.to_string()));
        }
        if let Some((a, b)) = s.split_once('*') {
            if a.is_empty() || b.is_empty() || b.contains('*') {
                return Err(Error::Config(format!("malformed interaction `{s}`")));
            }
            return Ok(TermSpec::Interaction(a.to_string(), b.to_string()));
        }
        if s.is_empty() || s.contains(['(', ')']) {
            return Err(Error::Config(format!("cannot parse basis term `{s}`")));
        }
        Ok(TermSpec::Raw(s))
    }
}

fn is_logwm1(s: &str) -> bool {
    s == "logwm1" || s == "log(w-1)"
}

impl fmt::Display for TermSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TermSpec::Intercept => write!(f, "1"),
            TermSpec::Raw(v) => write!(f, "{v}"),
            TermSpec::Interaction(a, b) => write!(f, "{a}*{b}"),
            TermSpec::LogWm1 => write!(f, "logwm1"),
            TermSpec::Spline3(v) => write!(f, "s3({v})"),
        }
    }
}

/// Ordered term list of a working model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct BasisSpec {
    pub terms: Vec<TermSpec>,
}

impl BasisSpec {
    pub fn new(terms: Vec<TermSpec>) -> Self {
        BasisSpec { terms }
    }

    pub fn parse<S: AsRef<str>>(terms: &[S]) -> Result<Self> {
        let terms = terms
            .iter()
            .map(|t| TermSpec::parse(t.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        if terms.is_empty() {
            return Err(Error::Config("basis has no terms".into()));
        }
        Ok(BasisSpec { terms })
    }

    pub fn intercept() -> Self {
        BasisSpec {
            terms: vec![TermSpec::Intercept],
        }
    }

    pub fn labels(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.to_string()).collect()
    }
}

impl TryFrom<Vec<String>> for BasisSpec {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        BasisSpec::parse(&v)
    }
}

impl From<BasisSpec> for Vec<String> {
    fn from(b: BasisSpec) -> Self {
        b.labels()
    }
}

impl fmt::Display for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.labels().join(", "))
    }
}

/// A variable resolved against the dataset's covariate names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    X(usize),
    Z(usize),
    W,
    LogWm1,
}

impl Var {
    pub fn resolve(name: &str, data: &SurveyDataset) -> Result<Var> {
        if name == "w" {
            return Ok(Var::W);
        }
        if is_logwm1(name) {
            return Ok(Var::LogWm1);
        }
        if let Some(j) = data.x_names().iter().position(|n| n == name) {
            return Ok(Var::X(j));
        }
        if let Some(j) = data.z_names().iter().position(|n| n == name) {
            return Ok(Var::Z(j));
        }
        Err(Error::Config(format!("basis references unknown variable `{name}`")))
    }

    /// Value for `unit`; `row` is only used in error messages.
    pub fn value(self, unit: &UnitRecord, row: usize) -> Result<f64> {
        let missing = |what: &str| Error::InvalidRow {
            row,
            message: format!("{what} required by the working model is not observed"),
        };
        match self {
            Var::X(j) => unit.x.as_ref().map(|x| x[j]).ok_or_else(|| missing("x")),
            Var::Z(j) => unit.z.as_ref().map(|z| z[j]).ok_or_else(|| missing("z")),
            Var::W => unit.w.ok_or_else(|| missing("w")),
            Var::LogWm1 => {
                let w = unit.w.ok_or_else(|| missing("w"))?;
                if w <= 1.0 {
                    return Err(Error::InvalidRow {
                        row,
                        message: format!("log(w-1) requires w > 1, found w = {w}"),
                    });
                }
                Ok((w - 1.0).ln())
            }
        }
    }

    pub fn is_x_only(self) -> bool {
        matches!(self, Var::X(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Term {
    Intercept,
    Raw(Var),
    Interaction(Var, Var),
    /// Boundary knots at the first and last entries.
    Spline3 { var: Var, knots: [f64; 4] },
}

impl Term {
    fn width(&self) -> usize {
        match self {
            Term::Spline3 { .. } => 3,
            _ => 1,
        }
    }

    fn vars(&self) -> Vec<Var> {
        match self {
            Term::Intercept => vec![],
            Term::Raw(v) | Term::Spline3 { var: v, .. } => vec![*v],
            Term::Interaction(a, b) => vec![*a, *b],
        }
    }
}

/// A basis with resolved variables and frozen spline knots.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    terms: Vec<Term>,
    labels: Vec<String>,
}

/// Type-7 sample quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Natural cubic spline columns for `x` with knots `k`, excluding the constant.
///
/// Uses the truncated-power construction on the unit-range scale
/// `u = (x - k0)/(k3 - k0)`: `(x, d1(u) - d3(u), d2(u) - d3(u))` with
/// `dj(u) = ((u - kj)+^3 - (u - k4)+^3)/(k4 - kj)`. The result is linear
/// outside the boundary knots.
fn natural_spline(x: f64, k: &[f64; 4], out: &mut [f64]) {
    let range = k[3] - k[0];
    let u = (x - k[0]) / range;
    let ku = [0.0, (k[1] - k[0]) / range, (k[2] - k[0]) / range, 1.0];
    let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
    let d = |j: usize| (cube(u - ku[j]) - cube(u - ku[3])) / (ku[3] - ku[j]);
    let d3 = d(2);
    out[0] = x;
    out[1] = d(0) - d3;
    out[2] = d(1) - d3;
}

impl Basis {
    /// Resolves `spec` against `data`'s covariate names, placing spline knots
    /// at the minimum, the 1/3 and 2/3 quantiles, and the maximum of the
    /// fitting units.
    pub fn resolve(spec: &BasisSpec, data: &SurveyDataset, units: &[UnitRecord]) -> Result<Basis> {
        let mut terms = Vec::with_capacity(spec.terms.len());
        let mut labels = Vec::new();
        for t in &spec.terms {
            let term = match t {
                TermSpec::Intercept => Term::Intercept,
                TermSpec::Raw(v) => Term::Raw(Var::resolve(v, data)?),
                TermSpec::LogWm1 => Term::Raw(Var::LogWm1),
                TermSpec::Interaction(a, b) => {
                    Term::Interaction(Var::resolve(a, data)?, Var::resolve(b, data)?)
                }
                TermSpec::Spline3(v) => {
                    let var = Var::resolve(v, data)?;
                    let mut vals = units
                        .iter()
                        .enumerate()
                        .map(|(i, u)| var.value(u, i + 1))
                        .collect::<Result<Vec<f64>>>()?;
                    if vals.len() < 4 {
                        return Err(Error::InvalidData(format!(
                            "spline term {t} needs at least 4 fitting units"
                        )));
                    }
                    vals.sort_by(f64::total_cmp);
                    let knots = [
                        vals[0],
                        quantile(&vals, 1.0 / 3.0),
                        quantile(&vals, 2.0 / 3.0),
                        vals[vals.len() - 1],
                    ];
                    if !(knots[0] < knots[1] && knots[1] < knots[2] && knots[2] < knots[3]) {
                        return Err(Error::RankDeficient {
                            column: format!("{t} (knots {knots:?} are not distinct)"),
                        });
                    }
                    Term::Spline3 { var, knots }
                }
            };
            match &term {
                Term::Spline3 { .. } => {
                    for j in 1..=3 {
                        labels.push(format!("{t}[{j}]"));
                    }
                }
                _ => labels.push(t.to_string()),
            }
            terms.push(term);
        }
        Ok(Basis { terms, labels })
    }

    pub fn ncols(&self) -> usize {
        self.terms.iter().map(Term::width).sum()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// `true` when every term depends on `x` only.
    pub fn is_x_only(&self) -> bool {
        self.terms.iter().all(|t| t.vars().into_iter().all(Var::is_x_only))
    }

    /// Writes the basis row for `unit` into `out` (length [`Basis::ncols`]).
    pub fn row_into(&self, unit: &UnitRecord, row: usize, out: &mut [f64]) -> Result<()> {
        let mut c = 0;
        for t in &self.terms {
            match t {
                Term::Intercept => out[c] = 1.0,
                Term::Raw(v) => out[c] = v.value(unit, row)?,
                Term::Interaction(a, b) => out[c] = a.value(unit, row)? * b.value(unit, row)?,
                Term::Spline3 { var, knots } => {
                    natural_spline(var.value(unit, row)?, knots, &mut out[c..c + 3])
                }
            }
            c += t.width();
        }
        Ok(())
    }

    pub fn row(&self, unit: &UnitRecord, row: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.ncols()];
        self.row_into(unit, row, &mut out)?;
        Ok(out)
    }

    /// Design matrix with one row per unit; rows are numbered from 1 in errors.
    pub fn design(&self, units: &[UnitRecord]) -> Result<DMatrix<f64>> {
        let p = self.ncols();
        let mut m = DMatrix::zeros(units.len(), p);
        let mut buf = vec![0.0; p];
        for (i, u) in units.iter().enumerate() {
            self.row_into(u, i + 1, &mut buf)?;
            for j in 0..p {
                m[(i, j)] = buf[j];
            }
        }
        Ok(m)
    }

    /// Rejects designs whose columns are numerically collinear, naming the
    /// first offending column.
    pub fn check_rank(&self, design: &DMatrix<f64>) -> Result<()> {
        let mut kept: Vec<nalgebra::DVector<f64>> = Vec::new();
        for j in 0..design.ncols() {
            let col = design.column(j).into_owned();
            let norm0 = col.norm();
            let mut v = col;
            // two passes of modified Gram-Schmidt
            for _ in 0..2 {
                for q in &kept {
                    let proj = q.dot(&v);
                    v.axpy(-proj, q, 1.0);
                }
            }
            let nv = v.norm();
            if norm0 == 0.0 || nv <= 1e-9 * norm0 {
                return Err(Error::RankDeficient {
                    column: self.labels[j].clone(),
                });
            }
            kept.push(v / nv);
        }
        Ok(())
    }
}

/// Resolves `spec` on `units`, builds the design matrix and checks its rank.
pub fn build_design(
    spec: &BasisSpec,
    data: &SurveyDataset,
    units: &[UnitRecord],
) -> Result<(Basis, DMatrix<f64>)> {
    let basis = Basis::resolve(spec, data, units)?;
    let design = basis.design(units)?;
    if design.nrows() < design.ncols() {
        return Err(Error::InvalidData(format!(
            "{} fitting units for {} design columns",
            design.nrows(),
            design.ncols()
        )));
    }
    basis.check_rank(&design)?;
    Ok((basis, design))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Setting;

    fn dataset(units: Vec<UnitRecord>) -> SurveyDataset {
        let n = units.len();
        SurveyDataset::new(units, n, Setting::Setting1, vec!["x".into()], vec!["z".into()]).unwrap()
    }

    #[test]
    fn parses_config_terms() {
        let b = BasisSpec::parse(&["1", "x", "z", "x*z", "s3(logwm1)", "log(w-1)", "w"]).unwrap();
        assert_eq!(
            b.terms,
            vec![
                TermSpec::Intercept,
                TermSpec::Raw("x".into()),
                TermSpec::Raw("z".into()),
                TermSpec::Interaction("x".into(), "z".into()),
                TermSpec::Spline3("logwm1".into()),
                TermSpec::LogWm1,
                TermSpec::Raw("w".into()),
            ]
        );
        assert!(BasisSpec::parse(&["s3()"]).is_err());
        assert!(BasisSpec::parse(&["x*"]).is_err());
        let empty: [&str; 0] = [];
        assert!(BasisSpec::parse(&empty).is_err());
    }

    #[test]
    fn raw_row() {
        let ds = dataset(vec![UnitRecord::respondent(vec![1.0], vec![2.0], 3.0, 0.0)]);
        let spec = BasisSpec::parse(&["1", "x", "z", "w"]).unwrap();
        let basis = Basis::resolve(&spec, &ds, ds.units()).unwrap();
        assert_eq!(basis.row(&ds.units()[0], 1).unwrap(), vec![1.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn spline_shape_and_rank() {
        let units: Vec<UnitRecord> = (0..50)
            .map(|i| {
                let x = (i as f64 * 0.37).sin() * 2.0;
                UnitRecord::respondent(vec![x], vec![0.0], 2.0, 0.0)
            })
            .collect();
        let ds = dataset(units);
        let (_, d) = build_design(&BasisSpec::parse(&["s3(x)"]).unwrap(), &ds, ds.units()).unwrap();
        assert_eq!((d.nrows(), d.ncols()), (50, 3));
        let (b, d) = build_design(&BasisSpec::parse(&["1", "s3(x)"]).unwrap(), &ds, ds.units()).unwrap();
        assert_eq!(d.ncols(), 4);
        assert_eq!(b.labels()[1], "s3(x)[1]");
    }

    #[test]
    fn spline_is_linear_beyond_boundary_knots() {
        let knots = [0.0, 1.0, 2.5, 4.0];
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        let mut c = [0.0; 3];
        natural_spline(5.0, &knots, &mut a);
        natural_spline(6.0, &knots, &mut b);
        natural_spline(7.0, &knots, &mut c);
        for j in 0..3 {
            assert!(((c[j] - b[j]) - (b[j] - a[j])).abs() < 1e-12);
        }
        natural_spline(-1.0, &knots, &mut a);
        assert_eq!(&a[1..], &[0.0, 0.0]);
    }

    #[test]
    fn logwm1_requires_w_above_one() {
        let ds = dataset(vec![UnitRecord::respondent(vec![1.0], vec![2.0], 1.0, 0.0)]);
        let err = build_design(&BasisSpec::parse(&["logwm1"]).unwrap(), &ds, ds.units()).unwrap_err();
        assert!(matches!(err, Error::InvalidRow { row: 1, .. }));
    }

    #[test]
    fn collinear_columns_are_named() {
        let units: Vec<UnitRecord> = (0..5)
            .map(|i| UnitRecord::respondent(vec![i as f64], vec![2.0 * i as f64], 2.0, 0.0))
            .collect();
        let ds = dataset(units);
        let err = build_design(&BasisSpec::parse(&["1", "x", "z"]).unwrap(), &ds, ds.units()).unwrap_err();
        assert_eq!(err, Error::RankDeficient { column: "z".into() });
    }

    #[test]
    fn unknown_variable_is_config_error() {
        let ds = dataset(vec![UnitRecord::respondent(vec![1.0], vec![2.0], 3.0, 0.0)]);
        assert!(matches!(
            Basis::resolve(&BasisSpec::parse(&["q"]).unwrap(), &ds, ds.units()),
            Err(Error::Config(_))
        ));
    }
}
