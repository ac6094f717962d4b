//! Plain-text model files: one `path.to.parameter = values` line per
//! tensor, matrices row-major, floats in shortest round-trip form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::layer::{DimParams, FeatureKind, Layer, MeanMode, DIM_PARAM_NAMES};
use super::model::DeepModel;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::kernels::MaternOrder;

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn row_major(m: &DMatrix<f64>) -> String {
    join((0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])))
}

/// Serializes `model`; `meta` lines (config echo, data transforms) are
/// written first and returned untouched by [`from_text`].
pub fn to_text(model: &DeepModel, meta: &[(String, String)]) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    for (k, v) in meta {
        line(k, v.clone());
    }
    line("model.layers", model.layers.len().to_string());
    line("model.train_samples", model.train_samples.to_string());
    line("model.eval_samples", model.eval_samples.to_string());
    line("likelihood.log_noise_variance", model.log_noise_variance.to_string());
    for (l, layer) in model.layers.iter().enumerate() {
        let pre = format!("layers.{l}");
        line(&format!("{pre}.in_dim"), layer.in_dim.to_string());
        line(&format!("{pre}.out_dim"), layer.out_dim.to_string());
        line(&format!("{pre}.order"), layer.order.label().into());
        line(&format!("{pre}.kind"), layer.kind.label().into());
        line(&format!("{pre}.interval"), join([layer.features.interval_a, layer.features.interval_b]));
        line(&format!("{pre}.frequencies"), layer.features.count.to_string());
        if let MeanMode::FixedLinear(w) = &layer.mean {
            line(&format!("{pre}.mean.weights"), row_major(w));
        }
        for (d, dim) in layer.dims.iter().enumerate() {
            for (name, v) in DIM_PARAM_NAMES.iter().zip(dim.as_array()) {
                line(&format!("{pre}.dims.{d}.{name}"), v.to_string());
            }
            if let Some(base) = layer.rff_base.get(d) {
                line(&format!("{pre}.dims.{d}.rff_base"), join(base.iter().copied()));
            }
        }
        for r in 0..layer.out_dim {
            line(&format!("{pre}.q.{r}.mean"), join(layer.q_mean[r].iter().copied()));
            line(&format!("{pre}.q.{r}.chol"), row_major(&layer.q_chol[r]));
        }
    }
    out
}

struct Entries(BTreeMap<String, String>);

impl Entries {
    fn take(&mut self, key: &str) -> Result<String> {
        self.0.remove(key).ok_or_else(|| Error::Parse(format!("model file is missing '{key}'")))
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.take(key)?;
        v.trim().parse().map_err(|_| Error::Parse(format!("'{key}': cannot parse '{v}'")))
    }

    fn floats(&mut self, key: &str, len: usize) -> Result<Vec<f64>> {
        let v = self.take(key)?;
        let out = v
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| Error::Parse(format!("'{key}': cannot parse '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        if out.len() != len {
            return Err(Error::Parse(format!("'{key}': expected {len} values, found {}", out.len())));
        }
        Ok(out)
    }
}

/// Parses a model file; returns the model and every non-model line.
pub fn from_text(text: &str) -> Result<(DeepModel, BTreeMap<String, String>)> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Parse(format!("line {}: expected 'key = value'", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let mut e = Entries(map);
    let n_layers: usize = e.parse("model.layers")?;
    let train_samples = e.parse("model.train_samples")?;
    let eval_samples = e.parse("model.eval_samples")?;
    let log_noise_variance = e.parse("likelihood.log_noise_variance")?;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let pre = format!("layers.{l}");
        let in_dim: usize = e.parse(&format!("{pre}.in_dim"))?;
        let out_dim: usize = e.parse(&format!("{pre}.out_dim"))?;
        let order: MaternOrder = e.parse(&format!("{pre}.order"))?;
        let kind: FeatureKind = e.parse(&format!("{pre}.kind"))?;
        let iv = e.floats(&format!("{pre}.interval"), 2)?;
        let count: usize = e.parse(&format!("{pre}.frequencies"))?;
        let features = FeatureSet::new(iv[0], iv[1], count)?;
        let key = format!("{pre}.mean.weights");
        let mean = if e.0.contains_key(&key) {
            MeanMode::FixedLinear(DMatrix::from_row_slice(in_dim, out_dim, &e.floats(&key, in_dim * out_dim)?))
        } else {
            MeanMode::ZeroMean
        };
        let mut dims = Vec::with_capacity(in_dim);
        let mut rff_base = Vec::new();
        for d in 0..in_dim {
            let mut v = [0.0; 4];
            for (slot, name) in v.iter_mut().zip(DIM_PARAM_NAMES) {
                *slot = e.parse(&format!("{pre}.dims.{d}.{name}"))?;
            }
            dims.push(DimParams::from_array(v));
            if kind == FeatureKind::Rff {
                rff_base.push(e.floats(&format!("{pre}.dims.{d}.rff_base"), count)?);
            }
        }
        let mut layer = Layer {
            in_dim,
            out_dim,
            order,
            kind,
            features,
            rff_base,
            dims,
            mean,
            q_mean: Vec::new(),
            q_chol: Vec::new(),
        };
        let p = layer.num_inducing();
        for r in 0..out_dim {
            layer.q_mean.push(DVector::from_vec(e.floats(&format!("{pre}.q.{r}.mean"), p)?));
            layer.q_chol.push(DMatrix::from_row_slice(p, p, &e.floats(&format!("{pre}.q.{r}.chol"), p * p)?));
        }
        layers.push(layer);
    }
    let model = DeepModel { layers, log_noise_variance, train_samples, eval_samples };
    model.validate()?;
    Ok((model, e.0))
}

pub fn save(path: &Path, model: &DeepModel, meta: &[(String, String)]) -> Result<()> {
    std::fs::write(path, to_text(model, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(DeepModel, BTreeMap<String, String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}
