//! Item response theory fitting engine.
//!
//! Estimates item parameters (difficulty, discrimination, guessing, feasibility)
//! and subject abilities from binary response matrices. Two estimators share the
//! same model kernels: Bock-Aitkin marginal maximum likelihood EM and stochastic
//! variational inference with mean-field Normal guides.

pub mod dataset;
pub mod error;
pub mod io;
pub mod math;
pub mod mml;
pub mod models;
pub mod plot;
pub mod quadrature;
pub mod registry;
pub mod vi;

pub use dataset::{ResponsePatternDataset, SimulationSpec};
pub use error::Error;
pub use mml::{fit_mml, map_ability, MmlConfig};
pub use models::{AbilityParams, ItemParams, ModelKind};
pub use quadrature::{make_quadrature, QuadratureRule};
pub use registry::{ModelRegistration, Registry};
pub use vi::{fit_svi, FitReport, PriorSpec, TrainConfig, VariationalPosterior};

/// Shared result alias for fallible operations across the crate.
pub type Result<T> = std::result::Result<T, Error>;
