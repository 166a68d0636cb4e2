//! Colorectal cancer natural-history microsimulation, Bayesian calibration by
//! incremental mixture importance sampling, and value-of-information analysis
//! of a colonoscopy screening program.
//!
//! Numeric kernels are generic over [`Scalar`]; the simulation and analysis
//! pipeline runs in `f64`, exposed through the aliases below.

pub mod error;
pub mod imis;
pub mod io;
pub mod microsim;
pub mod nathist;
pub mod pool;
pub mod psa;
pub mod scalar;
pub mod screening;
pub mod stats;
pub mod targets;

pub use error::{Error, Result};
pub use io::Provenance;
pub use pool::WorkerPool;
pub use scalar::Scalar;

/// Scalar type of the simulation and analysis pipeline.
pub type Real = f64;
pub type Params = nathist::NaturalHistoryParams<Real>;
pub type LifeTable = nathist::LifeTable<Real>;
pub type TransitionMatrix = nathist::TransitionMatrix<Real>;
pub type TransitionMatrixTable = nathist::TransitionMatrixTable<Real>;
pub type IntensityMatrix = nathist::IntensityMatrix<Real>;
