//! Optimization: Adam, the training loop with the β-freeze schedule, and
//! finite-difference gradient checks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::deep::{elbo_with_noise, DeepModel, SampleNoise};
use crate::error::{Error, Result};

/// Maps a positive value to the optimizer's unconstrained space.
pub fn unconstrain(x: f64) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::domain(format!("{x} is not a positive finite value")));
    }
    Ok(x.ln())
}

/// Inverse of [`unconstrain`].
pub fn constrain(u: f64) -> f64 {
    u.exp()
}

/// Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub steps: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { first: vec![0.0; n], second: vec![0.0; n], steps: 0 }
    }

    /// One descent step on `params` along `grads`. Entries with
    /// `frozen[i] == true` are left untouched, moments included.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, frozen: Option<&[bool]>) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
        assert_eq!(params.len(), self.first.len(), "optimizer state has the wrong length");
        self.steps += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.steps as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.steps as i32);
        for i in 0..params.len() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grads[i];
            self.first[i] = ADAM_BETA1 * self.first[i] + (1.0 - ADAM_BETA1) * g;
            self.second[i] = ADAM_BETA2 * self.second[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = self.first[i] / c1;
            let vhat = self.second[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// Initial hyperparameter values shared by every layer and input dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitConfig {
    pub lengthscale: f64,
    pub alpha: f64,
    pub beta: f64,
    pub kernel_variance: f64,
    pub noise_variance: f64,
    pub interval_a: f64,
    pub interval_b: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            lengthscale: 1.0,
            alpha: 1.0,
            beta: 0.01,
            kernel_variance: 0.1,
            noise_variance: 0.01,
            interval_a: -1.0,
            interval_b: 4.0,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lengthscale", self.lengthscale),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("kernel_variance", self.kernel_variance),
            ("noise_variance", self.noise_variance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("init.{name} must be positive, got {v}")));
            }
        }
        if !(self.interval_a < self.interval_b) {
            return Err(Error::Config(format!(
                "init interval must satisfy a < b, got [{}, {}]",
                self.interval_a, self.interval_b
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Capped at the dataset size.
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs during which `log α` and `log β` are held fixed.
    pub beta_freeze_epochs: usize,
    pub init: InitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, epochs: 3000, batch_size: 10_000, seed: 0, beta_freeze_epochs: 0, init: InitConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.beta_freeze_epochs > self.epochs {
            return Err(Error::Config(format!(
                "train.beta_freeze_epochs ({}) exceeds train.epochs ({})",
                self.beta_freeze_epochs, self.epochs
            )));
        }
        self.init.validate()
    }
}

/// One progress record; `metrics` holds `(rmse, nmll)` when a validation
/// evaluator is supplied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub nelbo: f64,
    pub metrics: Option<(f64, f64)>,
}

impl std::fmt::Display for EpochReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "epoch={} nelbo={}", self.epoch, self.nelbo)?;
        if let Some((rmse, nmll)) = self.metrics {
            write!(f, " rmse={rmse} nmll={nmll}")?;
        }
        Ok(())
    }
}

/// Validation hook: computes `(rmse, nmll)` for the current model.
pub type Evaluator<'a> = dyn FnMut(&DeepModel) -> Result<(f64, f64)> + 'a;

/// Minibatch Adam on the negative ELBO. `data` must already be normalized.
/// Returns the per-epoch mean negative ELBO. On a non-finite loss the model
/// is left at the last good parameters and a numerical error is returned.
pub fn fit(
    model: &mut DeepModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut validation: Option<&mut Evaluator<'_>>,
    sink: &mut dyn FnMut(&EpochReport),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("training data is empty"));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::Dimension(format!("data has {} input columns, model expects {}", data.dim(), model.input_dim())));
    }
    let n = data.len();
    let batch = cfg.batch_size.min(n);
    let mut params = model.params();
    let mut adam = Adam::new(params.len());
    let ode_mask = model.ode_mask();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let full = if batch == n { Some((data.inputs.clone(), data.targets.clone())) } else { None };
    for epoch in 0..cfg.epochs {
        let frozen = (epoch < cfg.beta_freeze_epochs).then_some(ode_mask.as_slice());
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch) {
            let (x, y) = match &full {
                Some((x, y)) => (x.clone(), y.clone()),
                None => (data.inputs.select_rows(chunk), chunk.iter().map(|&i| data.targets[i]).collect()),
            };
            let noise = SampleNoise::draw(model, x.nrows(), model.train_samples, &mut noise_rng);
            let out = match elbo_with_noise(model, &x, &y, n, &noise, true) {
                Ok(o) if o.gradient.iter().all(|g| g.is_finite()) => o,
                Ok(_) => return Err(Error::numerical(format!("non-finite gradient at epoch {epoch}; kept the last good state"))),
                Err(e) => return Err(Error::numerical(format!("epoch {epoch}: {e}; kept the last good state"))),
            };
            total += -out.value;
            steps += 1;
            let neg: Vec<f64> = out.gradient.iter().map(|g| -g).collect();
            let mut next = params.clone();
            adam.step(&mut next, &neg, cfg.learning_rate, frozen);
            model.set_params(&next)?;
            params = next;
        }
        let nelbo = total / steps as f64;
        let metrics = match validation.as_mut() {
            Some(eval) => Some(eval(model)?),
            None => None,
        };
        sink(&EpochReport { epoch, nelbo, metrics });
        trace.push(nelbo);
    }
    Ok(trace)
}

/// Relative errors of `grad` against central differences of `f` at `x`;
/// the denominator is floored at `floor`.
pub fn finite_difference_errors(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], grad: &[f64], step: f64, floor: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + step;
            let up = f(&p);
            p[i] = x[i] - step;
            let down = f(&p);
            p[i] = x[i];
            let fd = (up - down) / (2.0 * step);
            (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(floor)
        })
        .collect()
}

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Denominator floor of [`grad_check`], relative to `max(1, |ELBO|)`:
/// central differences carry a rounding error near `1e-16·|f|/step`, so
/// smaller gradient entries are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `(parameter group, max relative error)` in parameter order.
    pub groups: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compares the full-batch ELBO gradient with central differences under
/// common random numbers drawn from `seed`.
pub fn grad_check(model: &DeepModel, data: &Dataset, rel_tol: f64, seed: u64) -> Result<GradCheckReport> {
    let noise = SampleNoise::draw(model, data.len(), model.train_samples, &mut ChaCha8Rng::seed_from_u64(seed));
    let n = data.len();
    let analytic = elbo_with_noise(model, &data.inputs, &data.targets, n, &noise, true)?;
    let x0 = model.params();
    let mut probe = model.clone();
    let mut failure = None;
    let mut f = |p: &[f64]| -> f64 {
        probe.set_params(p).expect("same parameter count");
        match elbo_with_noise(&probe, &data.inputs, &data.targets, n, &noise, false) {
            Ok(o) => o.value,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    };
    let floor = GRAD_CHECK_FLOOR * analytic.value.abs().max(1.0);
    let errs = finite_difference_errors(&mut f, &x0, &analytic.gradient, GRAD_CHECK_STEP, floor);
    if let Some(e) = failure {
        return Err(e);
    }
    let groups: Vec<(String, f64)> =
        model.param_groups().into_iter().map(|g| (g.name, errs[g.range].iter().copied().fold(0.0, f64::max))).collect();
    let max_rel_err = errs.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { groups, max_rel_err, passed: max_rel_err < rel_tol })
}
