//! Compositional (deep) latent force models with sparse variational layers.

mod elbo;
mod layer;
mod model;
mod persist;
mod predict;

pub use elbo::{elbo, elbo_with_noise, layer_forward, ElboOutput, LayerOutput, SampleNoise, VARIANCE_FLOOR};
pub use persist::{from_text, load, save, to_text};
pub use predict::{predict_mixture, PredictiveDist};
pub use layer::{
    additive_layer_covariances, additive_prior_gram, fixed_linear_mean, DimParams, FeatureKind, Layer,
    LayerCovariances, MeanMode, DIM_PARAM_NAMES,
};
pub use model::{Architecture, DeepModel, ParamGroup, INNER_COV_SCALE};
