//! Quadrature reference values for the closed forms.
//!
//! Everything here is computed by brute-force numerical integration of the
//! defining integrals and is used only to cross-check the closed-form
//! kernels and features; the inference path never calls into this module.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kernels::{matern_eval, KernelSpec, MaternOrder, OdeSpec};
use crate::quad;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureConfig {
    /// Number of decay lengths covered below the upper limit in place of `-∞`.
    pub truncation_lengths: f64,
    /// Panel budget per integral.
    pub panel_count: usize,
    /// Absolute tolerance.
    pub tolerance: f64,
    /// Relative tolerance, so that small values are still resolved.
    pub relative_tolerance: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { truncation_lengths: 40.0, panel_count: 1 << 14, tolerance: 1e-8, relative_tolerance: 1e-11 }
    }
}

impl QuadratureConfig {
    fn validate(&self) -> Result<()> {
        if !(self.truncation_lengths >= 40.0) {
            return Err(Error::domain(format!(
                "truncation must cover at least 40 decay lengths, got {}",
                self.truncation_lengths
            )));
        }
        if self.panel_count == 0 || !(self.tolerance > 0.0) || !(self.relative_tolerance >= 0.0) {
            return Err(Error::domain("quadrature panel budget and tolerances must be positive"));
        }
        Ok(())
    }
}

/// `∫_{-∞}^t (1/β) e^{-γ(t-τ)} f(τ) dτ` for bounded `f`.
pub fn convolve_green<F: Fn(f64) -> f64>(f: F, ode: &OdeSpec, t: f64, cfg: &QuadratureConfig) -> Result<f64> {
    convolve_green_split(f, ode, t, &[], cfg)
}

/// As [`convolve_green`], additionally splitting the range at `breakpoints`
/// where `f` has kinks or branch switches.
pub fn convolve_green_split<F: Fn(f64) -> f64>(
    f: F,
    ode: &OdeSpec,
    t: f64,
    breakpoints: &[f64],
    cfg: &QuadratureConfig,
) -> Result<f64> {
    cfg.validate()?;
    let gamma = ode.gamma();
    let lower = t - cfg.truncation_lengths / gamma;
    let integrand = |tau: f64| (-gamma * (t - tau)).exp() * f(tau);
    let res = quad::integrate(
        integrand,
        lower,
        t,
        breakpoints,
        cfg.tolerance * ode.beta,
        cfg.relative_tolerance,
        cfg.panel_count,
    )?;
    Ok(res.value / ode.beta)
}

/// Nested-quadrature LFM covariance
/// `∫∫ G(t-τ) k(τ-τ') G(t2-τ') dτ dτ'`.
pub fn double_convolve_kernel(
    kspec: &KernelSpec,
    ode: &OdeSpec,
    t: f64,
    t2: f64,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    cfg.validate()?;
    let inner_cfg = QuadratureConfig { tolerance: cfg.tolerance * 1e-2, ..*cfg };
    let mut failure = None;
    let inner = |tau: f64| -> f64 {
        let kern = |s: f64| matern_eval(kspec, (tau - s).abs()).unwrap_or(f64::NAN);
        match convolve_green_split(kern, ode, t2, &[tau], &inner_cfg) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    };
    let cell = std::cell::RefCell::new(inner);
    let outer = convolve_green_split(|tau| (cell.borrow_mut())(tau), ode, t, &[t2], cfg);
    drop(cell);
    if let Some(e) = failure {
        return Err(e);
    }
    outer
}

/// Outcome of [`psd_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsdReport {
    pub passed: bool,
    pub min_eigenvalue: f64,
    /// The bound `-rel_tol · trace / size` the minimum eigenvalue was compared with.
    pub threshold: f64,
}

/// Whether a symmetric matrix is PSD up to `rel_tol · trace / size`.
pub fn psd_check(matrix: &DMatrix<f64>, rel_tol: f64) -> Result<PsdReport> {
    let n = matrix.nrows();
    if n != matrix.ncols() || n == 0 {
        return Err(Error::Dimension(format!("psd_check needs a non-empty square matrix, got {}x{}", n, matrix.ncols())));
    }
    let scale = matrix.amax().max(f64::MIN_POSITIVE);
    let asym = (matrix - matrix.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(Error::domain(format!("matrix is not symmetric (max asymmetry {asym:e})")));
    }
    let sym = (matrix + matrix.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min_eigenvalue = eig.eigenvalues.min();
    let threshold = -rel_tol * matrix.trace() / n as f64;
    Ok(PsdReport { passed: min_eigenvalue >= threshold, min_eigenvalue, threshold })
}

/// Matérn RKHS inner product on `[a, b]` by quadrature, for all three orders.
///
/// With generator `L = (D + λ)^p`, `p = ν + ½`, the inner product is
/// `x_g(a)ᵀ P∞⁻¹ x_h(a) + (1/q) ∫_a^b (Lg)(Lh)`, where `x(a)` holds the first
/// `p` derivatives (starting with the value) at `a`. `g` and `h` return the
/// value and the first three derivatives.
pub fn rkhs_inner(
    kspec: &KernelSpec,
    a: f64,
    b: f64,
    g: &dyn Fn(f64) -> [f64; 4],
    h: &dyn Fn(f64) -> [f64; 4],
    breakpoints: &[f64],
    cfg: &QuadratureConfig,
) -> Result<f64> {
    cfg.validate()?;
    let lam = kspec.lambda();
    let s2 = kspec.variance;
    let (coeffs, q): (&[f64], f64) = match kspec.order {
        MaternOrder::Half => (&[1.0, 1.0], 2.0 * lam * s2),
        MaternOrder::ThreeHalves => (&[1.0, 2.0, 1.0], 4.0 * lam.powi(3) * s2),
        MaternOrder::FiveHalves => (&[1.0, 3.0, 3.0, 1.0], 16.0 * lam.powi(5) * s2 / 3.0),
    };
    let p = coeffs.len() - 1;
    let apply = |d: [f64; 4]| -> f64 { (0..=p).map(|k| coeffs[k] * lam.powi((p - k) as i32) * d[k]).sum() };
    let integral = quad::integrate(
        |x| apply(g(x)) * apply(h(x)),
        a,
        b,
        breakpoints,
        cfg.tolerance,
        cfg.relative_tolerance,
        cfg.panel_count,
    )?;
    let (ga, ha) = (g(a), h(a));
    let l2 = lam * lam;
    let boundary = match kspec.order {
        MaternOrder::Half => ga[0] * ha[0] / s2,
        MaternOrder::ThreeHalves => (ga[0] * ha[0] + ga[1] * ha[1] / l2) / s2,
        MaternOrder::FiveHalves => {
            (9.0 / 8.0 * ga[0] * ha[0]
                + 3.0 / l2 * ga[1] * ha[1]
                + 3.0 / (8.0 * l2) * (ga[0] * ha[2] + ga[2] * ha[0])
                + 9.0 / (8.0 * l2 * l2) * ga[2] * ha[2])
                / s2
        }
    };
    Ok(integral.value / q + boundary)
}
