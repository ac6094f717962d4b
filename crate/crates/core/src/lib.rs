//! Sparse variational latent force models with Fourier response features.

pub mod config;
pub mod data;
pub mod deep;
pub mod dual;
pub mod error;
pub mod features;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod oracle;
pub mod quad;
pub mod train;
pub mod verify;

pub use config::RunConfig;
pub use data::{Dataset, Transforms};
pub use deep::{Architecture, DeepModel, FeatureKind, PredictiveDist};
pub use error::{Error, Result};
pub use features::{Basis, FeatureSet, VfrfContext};
pub use gp::{GaussianState, Marginals, NoiseModel};
pub use kernels::{KernelSpec, MaternOrder, OdeSpec};
pub use train::{InitConfig, TrainConfig};
