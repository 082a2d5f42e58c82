//! TOML run configuration.

use serde::{Deserialize, Serialize};
use surveyel::data::{ColumnSchema, LoadOptions};
use surveyel::estimators::{ElOptions, EstimatorSpec, ModelCatalog, SummarySpec};
use surveyel::sim::{GeneratorParams, Scenario};
use surveyel::variance::IntervalKind;
use surveyel::{Error, ExternalSummary, Result, Setting};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub estimator: Option<EstimatorConfig>,
    #[serde(default)]
    pub models: Option<ModelCatalog>,
    #[serde(default)]
    pub el: Option<ElOptions>,
    #[serde(default)]
    pub external: Option<ExternalConfig>,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
    #[serde(default)]
    pub scenario: Option<Scenario>,
    #[serde(default)]
    pub generate: Option<GenerateConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: String,
    pub setting: Setting,
    /// Required for Settings 2 and 3.
    #[serde(default)]
    pub population_size: Option<usize>,
    #[serde(default = "comma")]
    pub delimiter: String,
    #[serde(default)]
    pub schema: ColumnSchema,
}

fn comma() -> String {
    ",".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub id: EstimatorSpec,
    #[serde(default = "mean")]
    pub estimand: String,
}

fn mean() -> String {
    "mean".into()
}

/// External summary; `sigma1` is the per-observation variance matrix, so
/// that `sigma1 / n1` is the variance of `tau`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    pub tau: Vec<f64>,
    pub sigma1: Vec<Vec<f64>>,
    pub n1: usize,
    /// Defaults to the means of the dataset's `x` covariates.
    #[serde(default)]
    pub summary: Option<SummarySpec>,
}

impl ExternalConfig {
    pub fn build(&self) -> Result<ExternalSummary> {
        let q = self.tau.len();
        if self.sigma1.len() != q || self.sigma1.iter().any(|r| r.len() != q) {
            return Err(Error::Config(format!("external sigma1 must be {q} x {q}")));
        }
        let m = nalgebra::DMatrix::from_fn(q, q, |i, j| self.sigma1[i][j]);
        ExternalSummary::new(self.tau.clone(), m, self.n1).map_err(|e| Error::Config(format!("external summary: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(default = "default_b")]
    pub b: usize,
    #[serde(default)]
    pub interval: IntervalKind,
}

fn default_b() -> usize {
    200
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            b: default_b(),
            interval: IntervalKind::Normal,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    #[serde(default)]
    pub generator: GeneratorParams,
    #[serde(default = "one")]
    pub setting: Setting,
    pub path: String,
}

fn one() -> Setting {
    Setting::Setting1
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub format: Format,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        if c.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                c.schema_version
            )));
        }
        Ok(c)
    }

    pub fn data(&self) -> Result<&DataConfig> {
        self.data.as_ref().ok_or_else(|| Error::Config("config has no [data] table".into()))
    }

    pub fn estimator(&self) -> Result<&EstimatorConfig> {
        self.estimator
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [estimator] table".into()))
    }

    pub fn catalog(&self) -> ModelCatalog {
        self.models.clone().unwrap_or_default()
    }

    pub fn el_options(&self) -> ElOptions {
        self.el.clone().unwrap_or_default()
    }
}

impl DataConfig {
    pub fn load_options(&self) -> Result<LoadOptions> {
        let delimiter = match self.delimiter.as_str() {
            "," => b',',
            "\t" | "tab" => b'\t',
            ";" => b';',
            other => return Err(Error::Config(format!("unsupported delimiter `{other}`"))),
        };
        Ok(LoadOptions {
            setting: self.setting,
            schema: self.schema.clone(),
            population_size: self.population_size,
            delimiter,
        })
    }
}
