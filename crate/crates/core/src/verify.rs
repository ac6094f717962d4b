//! Closed-form versus quadrature-oracle suites behind the `verify` command.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{multistep_synthetic, Dataset, Transforms};
use crate::deep::{Architecture, DeepModel, FeatureKind};
use crate::error::{Error, Result};
use crate::features::{vff_eval, vfrf_eval, FeatureSet, VfrfContext};
use crate::kernels::{lfm_kernel_eval, KernelSpec, MaternOrder, OdeSpec};
use crate::oracle::{convolve_green_split, double_convolve_kernel, QuadratureConfig};
use crate::train::{fit, grad_check, InitConfig, TrainConfig};

/// Tolerance shared by the oracle suites.
pub const ORACLE_TOLERANCE: f64 = 1e-5;
/// Tolerance of the gradient suite.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Kernels,
    Vfrf,
    Gradients,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernels" => Ok(Suite::Kernels),
            "vfrf" => Ok(Suite::Vfrf),
            "gradients" => Ok(Suite::Gradients),
            "all" => Ok(Suite::All),
            other => Err(Error::Parse(format!("unknown suite '{other}' (expected kernels, vfrf, gradients or all)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FormulaReport {
    pub formula: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl std::fmt::Display for FormulaReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "formula={} max_rel_err={:e} pass={}", self.formula, self.max_rel_err, self.pass)
    }
}

/// Orders × `λ ∈ {1, 5}` × `γ ∈ {0.5, 4, λ, λ(1+1e-5)}` × `β ∈ {0.5, 1}`.
pub fn parameter_grid() -> Vec<(MaternOrder, f64, f64, f64)> {
    let mut grid = Vec::new();
    for order in MaternOrder::ALL {
        for lam in [1.0, 5.0] {
            for gam in [0.5, 4.0, lam, lam * (1.0 + 1e-5)] {
                for beta in [0.5, 1.0] {
                    grid.push((order, lam, gam, beta));
                }
            }
        }
    }
    grid
}

fn branch(lam: f64, gam: f64) -> &'static str {
    if (gam - lam).abs() <= 1e-4 * lam {
        "confluent"
    } else {
        "general"
    }
}

fn oracle_config() -> QuadratureConfig {
    QuadratureConfig { tolerance: 1e-15, relative_tolerance: 1e-12, ..Default::default() }
}

fn collect(errors: Vec<(String, f64)>, tol: f64) -> Vec<FormulaReport> {
    let mut out: Vec<FormulaReport> = Vec::new();
    for (formula, err) in errors {
        match out.iter_mut().find(|r| r.formula == formula) {
            Some(r) => r.max_rel_err = r.max_rel_err.max(err),
            None => out.push(FormulaReport { formula, max_rel_err: err, pass: false }),
        }
    }
    for r in &mut out {
        r.pass = r.max_rel_err < tol;
    }
    out
}

/// Closed-form LFM kernels against the double-convolution oracle over lags
/// `0, 0.01, …, 3`.
pub fn kernel_suite() -> Result<Vec<FormulaReport>> {
    let cfg = oracle_config();
    let mut errors = Vec::new();
    for (order, lam, gam, beta) in parameter_grid() {
        let k = KernelSpec::with_lambda(order, 1.0, lam)?;
        let ode = OdeSpec::new(gam * beta, beta)?;
        for i in 0..=300 {
            let r = i as f64 * 0.01;
            let closed = lfm_kernel_eval(&k, &ode, r)?;
            let oracle = double_convolve_kernel(&k, &ode, r, 0.0, &cfg)?;
            errors.push((format!("lfm_kernel[{}:{}]", order.label(), branch(lam, gam)), (closed - oracle).abs() / oracle.max(1e-12)));
        }
    }
    Ok(collect(errors, ORACLE_TOLERANCE))
}

/// Response features (constant, cosines and sines at `z₁`, `z₃`) against
/// the single-convolution oracle on 40 points spanning `[a−1, b+1]`.
pub fn vfrf_suite() -> Result<Vec<FormulaReport>> {
    let cfg = oracle_config();
    let (a, b) = (-1.0, 4.0);
    let fs = FeatureSet::new(a, b, 3)?;
    let mut errors = Vec::new();
    for (order, lam, gam, beta) in parameter_grid() {
        let k = KernelSpec::with_lambda(order, 1.0, lam)?;
        let ode = OdeSpec::new(gam * beta, beta)?;
        let ctx = VfrfContext::new(k, ode, fs.clone());
        for m in [0usize, 1, 3, 4, 6] {
            let family = if m == 0 { "constant" } else if m <= 3 { "cosine" } else { "sine" };
            for i in 0..40 {
                let t = (a - 1.0) + (b - a + 2.0) * i as f64 / 39.0;
                let closed = vfrf_eval(&ctx, m, t)?;
                let oracle = convolve_green_split(|tau| vff_eval(&k, &fs, m, tau).unwrap_or(f64::NAN), &ode, t, &[a, b], &cfg)?;
                errors.push((
                    format!("vfrf_{family}[{}:{}]", order.label(), branch(lam, gam)),
                    (closed - oracle).abs() / oracle.abs().max(1.0),
                ));
            }
        }
    }
    Ok(collect(errors, ORACLE_TOLERANCE))
}

fn perturbed_model(arch: &Architecture, data: &Dataset, seed: u64) -> Result<DeepModel> {
    let mut model = DeepModel::new(arch, &InitConfig::default(), &data.inputs, &mut ChaCha8Rng::seed_from_u64(seed))?;
    // a short training run moves every parameter away from its initial value
    let cfg = TrainConfig { epochs: 30, learning_rate: 0.02, seed, beta_freeze_epochs: 0, ..TrainConfig::default() };
    fit(&mut model, data, &cfg, None, &mut |_| {})?;
    Ok(model)
}

/// ELBO gradients against central differences for one- and two-layer
/// models of every feature kind.
pub fn gradient_suite() -> Result<Vec<FormulaReport>> {
    let raw = multistep_synthetic(20, 5, 0.05, 17)?;
    let data = Transforms::fit(&raw)?.apply(&raw)?;
    let mut out = Vec::new();
    for kind in [FeatureKind::Vfrf, FeatureKind::Rff] {
        for hidden in [vec![], vec![3]] {
            let arch = Architecture { input_dim: 1, hidden_dims: hidden.clone(), order: MaternOrder::ThreeHalves, frequencies: 4, kind };
            let model = perturbed_model(&arch, &data, 3)?;
            let report = grad_check(&model, &data, GRADIENT_TOLERANCE, 5)?;
            out.push(FormulaReport {
                formula: format!("elbo_gradient[{}:layers={}]", kind.label(), hidden.len() + 1),
                max_rel_err: report.max_rel_err,
                pass: report.passed,
            });
        }
    }
    Ok(out)
}

pub fn run_suite(suite: Suite) -> Result<Vec<FormulaReport>> {
    Ok(match suite {
        Suite::Kernels => kernel_suite()?,
        Suite::Vfrf => vfrf_suite()?,
        Suite::Gradients => gradient_suite()?,
        Suite::All => {
            let mut all = kernel_suite()?;
            all.extend(vfrf_suite()?);
            all.extend(gradient_suite()?);
            all
        }
    })
}

/// Matrix of `(t, vff, vfrf)` rows for one basis function on a grid.
pub fn feature_curves(ctx: &VfrfContext, basis: usize, t_min: f64, t_max: f64, n: usize) -> Result<DMatrix<f64>> {
    if basis >= ctx.features.size() {
        return Err(Error::domain(format!("basis index {basis} is out of range (size {})", ctx.features.size())));
    }
    if n == 0 || !(t_min <= t_max) {
        return Err(Error::domain("the grid needs n ≥ 1 and t_min ≤ t_max"));
    }
    let mut out = DMatrix::zeros(n, 3);
    for i in 0..n {
        let t = if n == 1 { t_min } else { t_min + (t_max - t_min) * i as f64 / (n - 1) as f64 };
        out[(i, 0)] = t;
        out[(i, 1)] = vff_eval(&ctx.kernel, &ctx.features, basis, t)?;
        out[(i, 2)] = vfrf_eval(ctx, basis, t)?;
    }
    Ok(out)
}
