//! Training and inference for the four-network inverse model: a forward
//! emulator, a Real-NVP density over outputs, and a variational encoder /
//! decoder pair that maps outputs plus latent draws back to parameters.

pub mod bundle;
pub mod config;
pub mod data;
pub mod ehr;
pub mod error;
pub mod impute;
pub mod invert;
pub mod manifold;
pub mod train;

pub use bundle::ModelBundle;
pub use config::{Architecture, Schedule, TrainingConfig};
pub use data::TrainingData;
pub use error::{InvaertError, Result};
pub use impute::{impute, ImputationResult};
pub use invert::{invert, relative_l2, InversionResult, Reconstruction, REFERENCE_OUTPUT};
pub use manifold::{manifold, ManifoldSample};
pub use train::{train_all, train_emulator, train_flow, train_vae_decoder, TrainReport};
