pub mod data;
pub mod dgp;
pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod learners;
pub mod nuisance;
pub mod par;

pub use data::{Covariates, ObservedDataset};
pub use error::{Error, Result};
pub use par::Workers;
