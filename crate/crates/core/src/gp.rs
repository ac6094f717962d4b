//! Exact GP regression, the inter-domain SVGP posterior and the Gaussian
//! quantities (KL, expected log-likelihood) used by the variational bound.

use nalgebra::{DMatrix, DVector};

use crate::dual::{Dual, Real};
use crate::error::{Error, Result};
use crate::features::{kfv_matrix, kvv_gram, VfrfContext};
use crate::kernels::{lfm_kernel_eval, lfm_value, KernelSpec, OdeSpec};
use crate::linalg::{robust_cholesky, Factor, KVV_JITTER};
use crate::train::Adam;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Negative predictive variances down to `-VARIANCE_CLAMP·max(1, prior)` are
/// treated as round-off and clamped to zero.
pub const VARIANCE_CLAMP: f64 = 1e-10;

/// `N(mean, L Lᵀ)` with `L` lower triangular.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov_factor: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(mean: DVector<f64>, cov_factor: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov_factor.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "covariance factor is {}x{}, mean has length {n}",
                cov_factor.nrows(),
                cov_factor.ncols()
            )));
        }
        for j in 0..n {
            for i in 0..j {
                if cov_factor[(i, j)] != 0.0 {
                    return Err(Error::domain("covariance factor must be lower triangular"));
                }
            }
        }
        let mut cov_factor = cov_factor;
        // flipping the sign of a column leaves L Lᵀ unchanged
        for j in 0..n {
            if cov_factor[(j, j)] < 0.0 {
                let mut col = cov_factor.column_mut(j);
                col *= -1.0;
            }
        }
        Ok(Self { mean, cov_factor })
    }

    pub fn from_covariance(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let f = robust_cholesky(cov, 0.0)?;
        Self::new(mean, f.l())
    }

    /// Zero-mean state with covariance `K`.
    pub fn prior(cov: &DMatrix<f64>) -> Result<Self> {
        Self::from_covariance(DVector::zeros(cov.nrows()), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.cov_factor * self.cov_factor.transpose()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub noise_variance: f64,
}

impl NoiseModel {
    pub fn new(noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(Error::domain(format!("noise variance must be positive, got {noise_variance}")));
        }
        Ok(Self { noise_variance })
    }
}

/// Per-point predictive means and variances.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

pub(crate) fn clamp_variance(v: f64, prior: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v >= -VARIANCE_CLAMP * prior.abs().max(1.0) {
        Ok(0.0)
    } else {
        Err(Error::numerical(format!("negative predictive variance {v:e}")))
    }
}

/// Exact GP posterior marginals at `xstar` for a zero-mean prior with
/// covariance `kernel` and Gaussian noise.
pub fn exact_posterior(
    kernel: &dyn Fn(f64, f64) -> f64,
    x: &[f64],
    y: &[f64],
    noise: &NoiseModel,
    xstar: &[f64],
) -> Result<Marginals> {
    check_targets(x, y)?;
    let factor = noisy_gram_factor(kernel, x, noise)?;
    let alpha = factor.solve_vec(&DVector::from_column_slice(y));
    let ksx = DMatrix::from_fn(x.len(), xstar.len(), |i, j| kernel(x[i], xstar[j]));
    let v = factor.solve(&ksx);
    let mut mean = Vec::with_capacity(xstar.len());
    let mut variance = Vec::with_capacity(xstar.len());
    for (j, &xs) in xstar.iter().enumerate() {
        let kcol = ksx.column(j);
        mean.push(kcol.dot(&alpha));
        let prior = kernel(xs, xs);
        variance.push(clamp_variance(prior - kcol.dot(&v.column(j)), prior)?);
    }
    Ok(Marginals { mean, variance })
}

fn check_targets(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("{} inputs but {} targets", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::domain("empty training set"));
    }
    Ok(())
}

fn noisy_gram_factor(kernel: &dyn Fn(f64, f64) -> f64, x: &[f64], noise: &NoiseModel) -> Result<Factor> {
    let mut k = DMatrix::from_fn(x.len(), x.len(), |i, j| kernel(x[i], x[j]));
    for i in 0..x.len() {
        k[(i, i)] += noise.noise_variance;
    }
    robust_cholesky(&k, 0.0)
}

/// `log N(y | 0, K + ε²I)`.
pub fn exact_log_marginal(
    kernel: &dyn Fn(f64, f64) -> f64,
    x: &[f64],
    y: &[f64],
    noise: &NoiseModel,
) -> Result<f64> {
    check_targets(x, y)?;
    let factor = noisy_gram_factor(kernel, x, noise)?;
    let yv = DVector::from_column_slice(y);
    let alpha = factor.solve_vec(&yv);
    Ok(-0.5 * yv.dot(&alpha) - 0.5 * factor.log_det() - 0.5 * x.len() as f64 * LN_2PI)
}

/// Hyperparameters of an exact single-output LFM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LfmHyper {
    pub kernel: KernelSpec,
    pub ode: OdeSpec,
    pub noise: NoiseModel,
}

impl LfmHyper {
    pub fn kernel_fn(&self) -> impl Fn(f64, f64) -> f64 {
        let (kernel, ode) = (self.kernel, self.ode);
        move |s, t| lfm_kernel_eval(&kernel, &ode, (s - t).abs()).unwrap_or(f64::NAN)
    }

    fn log_params(&self) -> [f64; 5] {
        [
            self.kernel.lengthscale.ln(),
            self.kernel.variance.ln(),
            self.ode.alpha.ln(),
            self.ode.beta.ln(),
            self.noise.noise_variance.ln(),
        ]
    }

    fn from_log_params(&self, p: &[f64]) -> Result<Self> {
        Ok(Self {
            kernel: KernelSpec::new(self.kernel.order, p[1].exp(), p[0].exp())?,
            ode: OdeSpec::new(p[2].exp(), p[3].exp())?,
            noise: NoiseModel::new(p[4].exp())?,
        })
    }
}

/// Exact LFM log marginal likelihood and its gradient with respect to
/// `(log ℓ, log σ², log α, log β, log ε²)`.
pub fn exact_lfm_log_marginal_grad(h: &LfmHyper, x: &[f64], y: &[f64]) -> Result<(f64, [f64; 5])> {
    check_targets(x, y)?;
    let n = x.len();
    let p = h.log_params();
    let var = |i: usize| Dual::<5>::variable(p[i], i).exp();
    let lam = var(0).recip() * h.kernel.order.lambda_factor();
    let (s2, alpha, beta) = (var(1), var(2), var(3));
    let gam = alpha / beta;
    let mut k = DMatrix::zeros(n, n);
    let mut dk = vec![DMatrix::zeros(n, n); 5];
    for i in 0..n {
        for j in 0..=i {
            let v = lfm_value(h.kernel.order, s2, lam, gam, beta, Dual::constant((x[i] - x[j]).abs()));
            k[(i, j)] = v.re;
            k[(j, i)] = v.re;
            for d in 0..4 {
                dk[d][(i, j)] = v.eps[d];
                dk[d][(j, i)] = v.eps[d];
            }
        }
        k[(i, i)] += h.noise.noise_variance;
        dk[4][(i, i)] = h.noise.noise_variance;
    }
    let factor = robust_cholesky(&k, 0.0)?;
    let yv = DVector::from_column_slice(y);
    let a = factor.solve_vec(&yv);
    let lml = -0.5 * yv.dot(&a) - 0.5 * factor.log_det() - 0.5 * n as f64 * LN_2PI;
    let w = &a * a.transpose() - factor.inverse();
    let mut grad = [0.0; 5];
    for d in 0..5 {
        grad[d] = 0.5 * w.component_mul(&dk[d]).sum();
    }
    Ok((lml, grad))
}

/// Maximizes the exact LFM marginal likelihood with Adam on log parameters.
pub fn fit_exact_lfm(init: &LfmHyper, x: &[f64], y: &[f64], iterations: usize, learning_rate: f64) -> Result<LfmHyper> {
    let mut params = init.log_params().to_vec();
    let mut best = (f64::NEG_INFINITY, *init);
    let mut adam = Adam::new(params.len());
    for _ in 0..iterations {
        let h = init.from_log_params(&params)?;
        let (lml, g) = exact_lfm_log_marginal_grad(&h, x, y)?;
        if !lml.is_finite() {
            break;
        }
        if lml > best.0 {
            best = (lml, h);
        }
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        adam.step(&mut params, &neg, learning_rate, None);
    }
    let last = init.from_log_params(&params)?;
    if let Ok(l) = exact_log_marginal(&last.kernel_fn(), x, y, &last.noise) {
        if l > best.0 {
            best = (l, last);
        }
    }
    Ok(best.1)
}

/// Marginals of `q(f) = ∫ p(f | v) q(v) dv` given `K_fv`, `K_vv`, the prior
/// variances `k(x, x)` and `q(v)`, with zero prior means.
pub fn sparse_marginals(
    kfv: &DMatrix<f64>,
    kvv: &DMatrix<f64>,
    kff: &[f64],
    q: &GaussianState,
) -> Result<Marginals> {
    let p = kvv.nrows();
    if kfv.ncols() != p || q.dim() != p || kfv.nrows() != kff.len() {
        return Err(Error::Dimension(format!(
            "K_fv {}x{}, K_vv {p}x{p}, {} prior variances, q of dim {}",
            kfv.nrows(),
            kfv.ncols(),
            kff.len(),
            q.dim()
        )));
    }
    let factor = robust_cholesky(kvv, KVV_JITTER)?;
    let b = factor.solve(&kfv.transpose());
    let mean: Vec<f64> = (b.transpose() * &q.mean).iter().copied().collect();
    let sb = q.cov_factor.transpose() * &b;
    let mut variance = Vec::with_capacity(kff.len());
    for i in 0..kff.len() {
        let v = kff[i] + sb.column(i).norm_squared() - kfv.row(i).transpose().dot(&b.column(i));
        variance.push(clamp_variance(v, kff[i])?);
    }
    Ok(Marginals { mean, variance })
}

/// SVGP marginals with VFRF inducing features:
/// mean `K_fv K_vv⁻¹ m`, variance `k(x,x) + diag(K_fv K_vv⁻¹ (S − K_vv) K_vv⁻¹ K_vf)`.
pub fn svgp_posterior(ctx: &VfrfContext, q: &GaussianState, xstar: &[f64]) -> Result<Marginals> {
    let kfv = kfv_matrix(ctx, xstar)?;
    let kvv = kvv_gram(ctx);
    let prior = lfm_kernel_eval(&ctx.kernel, &ctx.ode, 0.0)?;
    sparse_marginals(&kfv, &kvv, &vec![prior; xstar.len()], q)
}

/// `K_vv` with the relative diagonal jitter applied, as used by every
/// variational computation.
pub fn jittered_kvv(kvv: &DMatrix<f64>) -> DMatrix<f64> {
    let mut k = kvv.clone();
    for i in 0..k.nrows() {
        k[(i, i)] *= 1.0 + KVV_JITTER;
    }
    k
}

/// Collapsed-bound optimum of `q(v)` for a Gaussian likelihood:
/// `Σ = K_vv + ε⁻²K_vf K_fv`, `m = ε⁻² K_vv Σ⁻¹ K_vf y`, `S = K_vv Σ⁻¹ K_vv`.
pub fn optimal_q(kfv: &DMatrix<f64>, kvv: &DMatrix<f64>, y: &[f64], noise: &NoiseModel) -> Result<GaussianState> {
    if kfv.nrows() != y.len() || kfv.ncols() != kvv.nrows() {
        return Err(Error::Dimension("K_fv, K_vv and targets disagree in size".into()));
    }
    let kv = jittered_kvv(kvv);
    let inv_noise = 1.0 / noise.noise_variance;
    let sigma = &kv + kfv.transpose() * kfv * inv_noise;
    let fs = robust_cholesky(&sigma, 0.0)?;
    let yv = DVector::from_column_slice(y);
    let mean = &kv * fs.solve_vec(&(kfv.transpose() * yv)) * inv_noise;
    let mut s = &kv * fs.solve(&kv);
    s = (&s + s.transpose()) * 0.5;
    GaussianState::from_covariance(mean, &s)
}

/// `Σ_i E_{N(μ_i, v_i)} log N(y_i | f, ε²)`.
pub fn expected_gaussian_loglik(pred_mean: &[f64], pred_var: &[f64], y: &[f64], noise: &NoiseModel) -> f64 {
    let e2 = noise.noise_variance;
    pred_mean
        .iter()
        .zip(pred_var)
        .zip(y)
        .map(|((&mu, &v), &yi)| -0.5 * (LN_2PI + e2.ln()) - ((yi - mu).powi(2) + v) / (2.0 * e2))
        .sum()
}

/// `KL(q ‖ p)` between Gaussians given by Cholesky-type factors.
pub fn gaussian_kl(q: &GaussianState, p: &GaussianState) -> Result<f64> {
    let k = q.dim();
    if p.dim() != k {
        return Err(Error::Dimension(format!("KL between dimensions {k} and {}", p.dim())));
    }
    let lp = &p.cov_factor;
    if lp.diagonal().iter().any(|d| !(d.abs() > 0.0)) {
        return Err(Error::numerical("singular prior covariance in KL"));
    }
    let lq = &q.cov_factor;
    let a = lp
        .solve_lower_triangular(lq)
        .ok_or_else(|| Error::numerical("triangular solve failed in KL"))?;
    let diff = &p.mean - &q.mean;
    let b = lp
        .solve_lower_triangular(&diff)
        .ok_or_else(|| Error::numerical("triangular solve failed in KL"))?;
    let logdet_p: f64 = lp.diagonal().iter().map(|d| 2.0 * d.abs().ln()).sum();
    let logdet_q: f64 = lq.diagonal().iter().map(|d| 2.0 * d.abs().ln()).sum();
    let kl = 0.5 * (a.norm_squared() + b.norm_squared() - k as f64 + logdet_p - logdet_q);
    Ok(kl.max(0.0))
}

/// Single-layer bound `Σ E log p(y|f) − KL(q(v) ‖ N(0, K_vv))` with the
/// jittered `K_vv` used throughout.
pub fn single_layer_elbo(
    kfv: &DMatrix<f64>,
    kvv: &DMatrix<f64>,
    kff: &[f64],
    q: &GaussianState,
    y: &[f64],
    noise: &NoiseModel,
) -> Result<f64> {
    let marg = sparse_marginals(kfv, kvv, kff, q)?;
    let prior = GaussianState::prior(&jittered_kvv(kvv))?;
    Ok(expected_gaussian_loglik(&marg.mean, &marg.variance, y, noise) - gaussian_kl(q, &prior)?)
}
