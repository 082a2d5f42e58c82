//! Survey-sampling estimators under informative sampling and nonresponse.

pub mod data;
pub mod error;
pub mod estimand;
pub mod el;
pub mod estimators;
pub mod models;
pub mod rng;
pub mod sim;
pub mod variance;

pub use data::{ExternalSummary, Setting, SurveyDataset, UnitRecord};
pub use error::{Error, ErrorCategory, Result};
pub use estimand::{EqTerm, Estimand};
