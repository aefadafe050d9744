//! Mixture of latent trait analyzers with concomitant variables for binary
//! bipartite networks (senders by skills), fitted by variational EM.
//!
//! ```no_run
//! use mlta::{fit, io, FitOptions, ModelConfig, Variant};
//!
//! let data = io::read_dataset("data".as_ref())?;
//! let cfg = ModelConfig::new(3, 1, Variant::Constrained)?;
//! let res = fit(&data, cfg, &FitOptions::default())?;
//! println!("BIC {}", res.bic);
//! # Ok::<(), mlta::MltaError>(())
//! ```

pub mod bootstrap;
pub mod data;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod posthoc;
pub mod rng;
pub mod selection;
pub mod synth;
pub mod variational;

pub use bootstrap::{align_labels, bootstrap_se, resample, BootstrapResult, BootstrapSpec};
pub use data::{
    complete_cases, covariate_distribution, dichotomize, encode_covariates, ingest, tie_density, CovariateDesign,
    CovariateSpec, Dataset, DichotomizationRule, IncidenceMatrix, IngestSchema, RawSurveyTable,
};
pub use error::{ErrorClass, MltaError, Result};
pub use model::{GatingParams, ItemParams, MltaModel, ModelConfig, Variant};
pub use posthoc::{adjusted_rand_index, group_probs_by_covariate, map_assign, predicted_skill_probs, TraitPlugIn};
pub use selection::{grid_search, select_best, SelectionGrid, SelectionTable};
pub use synth::{random_model, simulate, QuadratureSpec, SimTruth};
pub use variational::{fit, FitOptions, FitResult, VariationalState};
