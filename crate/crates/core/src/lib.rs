//! Six-compartment lumped-parameter circulation model with stiff time
//! integration, spectral stiffness analysis, clinical output extraction and
//! simulation-based dataset generation.

pub mod dataset;
pub mod eigen;
pub mod error;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod outputs;
pub mod parallel;
pub mod params;
pub mod stiffness;

pub use error::{CoreError, Result};
pub use model::Cvsim6;
pub use ode::{integrate, Method, SolverConfig, StateTrajectory};
pub use outputs::{ClinicalOutput, NoiseModel, N_OUTPUTS, OUTPUT_NAMES};
pub use params::{ParameterVector, N_PARAMS, PARAM_NAMES};
