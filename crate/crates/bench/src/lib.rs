//! Shared fixtures for the benchmarks.

use surveyel::estimators::{first_step_constraints, fit_working_models, EstimatorSpec, ModelCatalog};
use surveyel::sim::{generate_population, GeneratorParams};
use surveyel::{Estimand, SurveyDataset};

/// One default-generator population (N = 10,000).
pub fn population(seed: u64) -> SurveyDataset {
    generate_population(&GeneratorParams {
        seed,
        ..Default::default()
    })
    .expect("default generator")
}

/// First-step constraint rows of `EL10|10` at `theta = 0`: about 400 rows
/// and 4 columns.
pub fn first_step_rows(data: &SurveyDataset) -> nalgebra::DMatrix<f64> {
    let spec = EstimatorSpec::parse("EL10|10").expect("id");
    let p = fit_working_models(data, &spec, &ModelCatalog::default())
        .and_then(|m| m.predict(data))
        .expect("models fit");
    first_step_constraints(data, &p.pi, &p.m, &Estimand::mean(), &[0.0]).expect("rows")
}
