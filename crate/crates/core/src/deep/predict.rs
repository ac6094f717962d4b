//! Mixture predictive distribution over the outer layer's output.

use nalgebra::DMatrix;
use rand::Rng;

use super::elbo::{propagate, SampleNoise};
use super::model::DeepModel;
use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Per-point equal-weight Gaussian mixture: `S` components over `N` points.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDist {
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl PredictiveDist {
    /// `means[s][i]` and `variances[s][i]` of component `s` at point `i`.
    pub fn from_components(means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let n = means.first().map_or(0, Vec::len);
        if means.is_empty() || means.len() != variances.len() {
            return Err(Error::Dimension("a mixture needs matching, nonempty component lists".into()));
        }
        if means.iter().chain(&variances).any(|c| c.len() != n) {
            return Err(Error::Dimension("components must cover the same points".into()));
        }
        if variances.iter().flatten().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::domain("component variances must be positive and finite"));
        }
        Ok(Self { means, variances })
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn len(&self) -> usize {
        self.means[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn component_means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn component_variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    pub fn mean(&self) -> Vec<f64> {
        let s = self.components() as f64;
        (0..self.len()).map(|i| self.means.iter().map(|m| m[i]).sum::<f64>() / s).collect()
    }

    /// Mean of component variances plus variance of component means.
    pub fn variance(&self) -> Vec<f64> {
        let s = self.components() as f64;
        let mean = self.mean();
        (0..self.len())
            .map(|i| {
                self.means
                    .iter()
                    .zip(&self.variances)
                    .map(|(m, v)| v[i] + (m[i] - mean[i]).powi(2))
                    .sum::<f64>()
                    / s
            })
            .collect()
    }

    /// `log (1/S) Σ_s N(y_i; μ_si, v_si)` per point, via log-mean-exp.
    pub fn log_density(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.len() {
            return Err(Error::Dimension(format!("{} targets for {} predictive points", y.len(), self.len())));
        }
        let ln_s = (self.components() as f64).ln();
        Ok(y.iter()
            .enumerate()
            .map(|(i, &yi)| {
                let terms: Vec<f64> = self
                    .means
                    .iter()
                    .zip(&self.variances)
                    .map(|(m, v)| -HALF_LN_2PI - 0.5 * v[i].ln() - (yi - m[i]).powi(2) / (2.0 * v[i]))
                    .collect();
                let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln() - ln_s
            })
            .collect())
    }

    /// The distribution of `shift + scale·y`.
    pub fn affine(&self, shift: f64, scale: f64) -> Self {
        Self {
            means: self.means.iter().map(|c| c.iter().map(|m| shift + scale * m).collect()).collect(),
            variances: self.variances.iter().map(|c| c.iter().map(|v| v * scale * scale).collect()).collect(),
        }
    }
}

/// Observation-space mixture at `xstar` with `model.eval_samples` hidden
/// sample paths. A single-layer model yields identical components.
pub fn predict_mixture<R: Rng + ?Sized>(model: &DeepModel, xstar: &DMatrix<f64>, rng: &mut R) -> Result<PredictiveDist> {
    let samples = model.eval_samples.max(1);
    let noise = if model.layers.len() == 1 {
        SampleNoise::zeros(model, xstar.nrows(), 1)
    } else {
        SampleNoise::draw(model, xstar.nrows(), samples, rng)
    };
    let (mut means, vars) = propagate(model, xstar, &noise)?;
    let e2 = model.noise().noise_variance;
    let mut variances: Vec<Vec<f64>> = vars.into_iter().map(|c| c.into_iter().map(|v| v + e2).collect()).collect();
    if model.layers.len() == 1 {
        means = vec![means[0].clone(); samples];
        variances = vec![variances[0].clone(); samples];
    }
    PredictiveDist::from_components(means, variances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deep::{Architecture, FeatureKind};
    use crate::kernels::MaternOrder;
    use crate::train::InitConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_normal_density_at_zero() {
        let p = PredictiveDist::from_components(vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        assert!((p.log_density(&[0.0]).unwrap()[0] + 0.918938533204673).abs() < 1e-12);
    }

    #[test]
    fn two_component_density() {
        let p = PredictiveDist::from_components(vec![vec![1.0], vec![-1.0]], vec![vec![1.0], vec![1.0]]).unwrap();
        assert!((p.log_density(&[0.0]).unwrap()[0] + 1.418938533204673).abs() < 1e-12);
        assert_eq!(p.mean(), vec![0.0]);
        assert!((p.variance()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn affine_maps_density_with_jacobian() {
        let p = PredictiveDist::from_components(vec![vec![0.3], vec![-0.2]], vec![vec![0.5], vec![0.9]]).unwrap();
        let q = p.affine(2.0, 3.0);
        let lp = p.log_density(&[0.1]).unwrap()[0];
        let lq = q.log_density(&[2.3]).unwrap()[0];
        assert!((lq - (lp - 3f64.ln())).abs() < 1e-12);
    }

    fn deep_model(hidden: Vec<usize>) -> DeepModel {
        let x = DMatrix::from_fn(10, 1, |i, _| i as f64 * 0.3);
        let arch = Architecture { input_dim: 1, hidden_dims: hidden, order: MaternOrder::ThreeHalves, frequencies: 3, kind: FeatureKind::Vfrf };
        let mut m = DeepModel::new(&arch, &InitConfig::default(), &x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.eval_samples = 7;
        // make the hidden layer visibly stochastic
        for l in &mut m.layers {
            for c in &mut l.q_chol {
                c.fill_diagonal(0.5);
            }
            for m in &mut l.q_mean {
                m.fill(0.4);
            }
        }
        m
    }

    #[test]
    fn single_layer_gives_identical_components() {
        let m = deep_model(vec![]);
        let x = DMatrix::from_fn(4, 1, |i, _| i as f64);
        let p = predict_mixture(&m, &x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p.components(), 7);
        assert!(p.component_means().iter().all(|c| c == &p.component_means()[0]));
    }

    #[test]
    fn mixture_moments_follow_total_variance() {
        let m = deep_model(vec![1]);
        let x = DMatrix::from_fn(5, 1, |i, _| i as f64 * 0.7);
        let p = predict_mixture(&m, &x, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mean = p.mean();
        let var = p.variance();
        for i in 0..5 {
            let avg_m: f64 = p.component_means().iter().map(|c| c[i]).sum::<f64>() / 7.0;
            let avg_v: f64 = p.component_variances().iter().map(|c| c[i]).sum::<f64>() / 7.0;
            let var_m: f64 = p.component_means().iter().map(|c| (c[i] - avg_m).powi(2)).sum::<f64>() / 7.0;
            assert!((mean[i] - avg_m).abs() < 1e-14);
            assert!((var[i] - avg_v - var_m).abs() < 1e-12 * var[i]);
            assert!(var_m > 0.0);
        }
        let again = predict_mixture(&m, &x, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let m = deep_model(vec![]);
        let x = DMatrix::zeros(3, 2);
        assert!(matches!(predict_mixture(&m, &x, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Dimension(_))));
    }
}
