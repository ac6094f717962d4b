//! The compositional model: construction, initialization and the flat
//! unconstrained parameter vector used by the optimizer.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::layer::{fixed_linear_mean, DimParams, FeatureKind, Layer, MeanMode, DIM_PARAM_NAMES};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::gp::NoiseModel;
use crate::kernels::{standard_spectral_sample, MaternOrder};
use crate::train::InitConfig;

/// Initial variational covariance scale of inner layers.
pub const INNER_COV_SCALE: f64 = 1e-5;

/// Layer widths and feature choices.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the hidden layers (`layers - 1` entries).
    pub hidden_dims: Vec<usize>,
    pub order: MaternOrder,
    /// Frequencies per input dimension (`M`).
    pub frequencies: usize,
    pub kind: FeatureKind,
}

impl Architecture {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(1);
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepModel {
    pub layers: Vec<Layer>,
    pub log_noise_variance: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
}

/// A named contiguous slice of the parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub range: Range<usize>,
    /// Whether this is an ODE coefficient (`log α` or `log β`).
    pub ode: bool,
}

impl DeepModel {
    /// Builds and initializes a model. `train_inputs` (already normalized)
    /// fix the linear mean weights of inner layers; `rng` draws the random
    /// frequencies of RFF layers.
    pub fn new<R: Rng + ?Sized>(
        arch: &Architecture,
        init: &InitConfig,
        train_inputs: &DMatrix<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        init.validate()?;
        if arch.input_dim == 0 || arch.hidden_dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if arch.frequencies == 0 {
            return Err(Error::Config("model.M must be at least 1".into()));
        }
        if train_inputs.ncols() != arch.input_dim {
            return Err(Error::Dimension(format!(
                "training inputs have {} columns, architecture expects {}",
                train_inputs.ncols(),
                arch.input_dim
            )));
        }
        let widths = arch.widths();
        let n_layers = widths.len() - 1;
        let features = FeatureSet::new(init.interval_a, init.interval_b, arch.frequencies)?;
        let mut inputs = train_inputs.clone();
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (in_dim, out_dim) = (widths[l], widths[l + 1]);
            let outer = l + 1 == n_layers;
            let mean = if outer {
                MeanMode::ZeroMean
            } else {
                let w = fixed_linear_mean(&inputs, in_dim, out_dim)?;
                inputs = &inputs * &w;
                MeanMode::FixedLinear(w)
            };
            let rff_base = if arch.kind == FeatureKind::Rff {
                (0..in_dim).map(|_| standard_spectral_sample(arch.order, arch.frequencies, rng)).collect()
            } else {
                Vec::new()
            };
            let block = if arch.kind == FeatureKind::Rff { 2 * arch.frequencies } else { features.size() };
            let p = block * in_dim;
            let scale = if outer { 1.0 } else { INNER_COV_SCALE.sqrt() };
            let dim = DimParams::new(init.lengthscale, init.kernel_variance, init.alpha, init.beta)?;
            layers.push(Layer {
                in_dim,
                out_dim,
                order: arch.order,
                kind: arch.kind,
                features: features.clone(),
                rff_base,
                dims: vec![dim; in_dim],
                mean,
                q_mean: vec![DVector::zeros(p); out_dim],
                q_chol: vec![DMatrix::identity(p, p) * scale; out_dim],
            });
        }
        Ok(Self { layers, log_noise_variance: init.noise_variance.ln(), train_samples: 5, eval_samples: 100 })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel { noise_variance: self.log_noise_variance.exp() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.validate().map_err(|e| Error::Dimension(format!("layer {l}: {e}")))?;
            if l > 0 && self.layers[l - 1].out_dim != layer.in_dim {
                return Err(Error::Dimension(format!("layer {l} input width does not match layer {} output", l - 1)));
            }
        }
        if self.layers.last().unwrap().out_dim != 1 {
            return Err(Error::Dimension("the outer layer must have a single output".into()));
        }
        Ok(())
    }

    /// Layout of the flat parameter vector.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut groups = Vec::new();
        let mut at = 0;
        let mut push = |name: String, len: usize, ode: bool| {
            groups.push(ParamGroup { name, range: at..at + len, ode });
            at += len;
        };
        for (l, layer) in self.layers.iter().enumerate() {
            for d in 0..layer.in_dim {
                for (k, pname) in DIM_PARAM_NAMES.iter().enumerate() {
                    push(format!("layers.{l}.dims.{d}.{pname}"), 1, k >= 2);
                }
            }
            let p = layer.num_inducing();
            for r in 0..layer.out_dim {
                push(format!("layers.{l}.q.{r}.mean"), p, false);
                push(format!("layers.{l}.q.{r}.chol"), p * (p + 1) / 2, false);
            }
        }
        push("likelihood.log_noise_variance".into(), 1, false);
        groups
    }

    pub fn num_params(&self) -> usize {
        self.param_groups().last().map_or(0, |g| g.range.end)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            for d in &layer.dims {
                out.extend(d.as_array());
            }
            for r in 0..layer.out_dim {
                out.extend(layer.q_mean[r].iter());
                push_lower(&layer.q_chol[r], &mut out);
            }
        }
        out.push(self.log_noise_variance);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Dimension(format!("{} parameters given, model has {}", params.len(), self.num_params())));
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            for d in layer.dims.iter_mut() {
                let v = [it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
                *d = DimParams::from_array(v);
            }
            let p = layer.num_inducing();
            for r in 0..layer.out_dim {
                for i in 0..p {
                    layer.q_mean[r][i] = it.next().unwrap();
                }
                let l = &mut layer.q_chol[r];
                for j in 0..p {
                    for i in j..p {
                        l[(i, j)] = it.next().unwrap();
                    }
                }
            }
        }
        self.log_noise_variance = it.next().unwrap();
        Ok(())
    }

    /// `true` for every `log α`/`log β` entry of the parameter vector.
    pub fn ode_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.num_params()];
        for g in self.param_groups() {
            if g.ode {
                mask[g.range].fill(true);
            }
        }
        mask
    }
}

/// Appends the lower triangle of `l`, column by column.
pub(crate) fn push_lower(l: &DMatrix<f64>, out: &mut Vec<f64>) {
    let p = l.nrows();
    for j in 0..p {
        for i in j..p {
            out.push(l[(i, j)]);
        }
    }
}
