//! Matérn kernels and the latent-force (ODE double-convolved) kernels built on them.
//!
//! The latent force `u ~ GP(0, k)` drives the first-order system
//! `β f'(t) + α f(t) = u(t)`, whose Green's function is `G(t) = e^{-γt}/β`
//! with `γ = α/β`. The output covariance `G∘k∘G` has a closed form for the
//! three half-integer Matérn orders. Each form is singular at `γ = λ`; near that
//! point the value is obtained from a polynomial blend in `γ` anchored on the
//! confluent (`γ = λ`) expression, see [`CONFLUENT_BAND`].

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StudentT};

use crate::dual::{Dual, Real};
use crate::error::{Error, Result};

/// Relative half-width of the band `|γ-λ|/λ < CONFLUENT_BAND` inside which the
/// generic closed forms are replaced by a quartic blend through the confluent
/// value and the generic forms at `λ(1±h)`, `λ(1±2h)`.
pub const CONFLUENT_BAND: f64 = 5e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaternOrder {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl MaternOrder {
    pub const ALL: [MaternOrder; 3] = [Self::Half, Self::ThreeHalves, Self::FiveHalves];

    pub fn nu(self) -> f64 {
        match self {
            Self::Half => 0.5,
            Self::ThreeHalves => 1.5,
            Self::FiveHalves => 2.5,
        }
    }

    /// `√(2ν)`, so that `λ = √(2ν)/ℓ`.
    pub fn lambda_factor(self) -> f64 {
        match self {
            Self::Half => 1.0,
            Self::ThreeHalves => 3f64.sqrt(),
            Self::FiveHalves => 5f64.sqrt(),
        }
    }

    /// Degrees of freedom `2ν` of the Student-t spectral density.
    pub fn spectral_dof(self) -> f64 {
        2.0 * self.nu()
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Half => "1/2",
            Self::ThreeHalves => "3/2",
            Self::FiveHalves => "5/2",
        }
    }
}

impl std::str::FromStr for MaternOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1/2" | "half" | "0.5" | "12" => Ok(Self::Half),
            "3/2" | "threehalves" | "1.5" | "32" => Ok(Self::ThreeHalves),
            "5/2" | "fivehalves" | "2.5" | "52" => Ok(Self::FiveHalves),
            other => Err(Error::UnsupportedOrder(other.to_string())),
        }
    }
}

impl std::fmt::Display for MaternOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Matérn covariance of the latent force.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    pub order: MaternOrder,
    pub variance: f64,
    pub lengthscale: f64,
}

impl KernelSpec {
    pub fn new(order: MaternOrder, variance: f64, lengthscale: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::domain(format!("kernel variance must be positive, got {variance}")));
        }
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::domain(format!(
                "kernel lengthscale must be positive, got {lengthscale}"
            )));
        }
        Ok(Self { order, variance, lengthscale })
    }

    /// Build from the decay rate `λ` instead of the lengthscale.
    pub fn with_lambda(order: MaternOrder, variance: f64, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::domain(format!("lambda must be positive, got {lambda}")));
        }
        Self::new(order, variance, order.lambda_factor() / lambda)
    }

    pub fn lambda(&self) -> f64 {
        self.order.lambda_factor() / self.lengthscale
    }
}

/// Coefficients of `β f' + α f = u`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdeSpec {
    pub alpha: f64,
    pub beta: f64,
}

impl OdeSpec {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
            return Err(Error::domain(format!(
                "ODE coefficients must be positive, got alpha={alpha} beta={beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// Decay rate `γ = α/β` of the Green's function.
    pub fn gamma(&self) -> f64 {
        self.alpha / self.beta
    }

    pub fn green(&self, s: f64) -> f64 {
        if s < 0.0 {
            0.0
        } else {
            (-self.gamma() * s).exp() / self.beta
        }
    }
}

pub(crate) fn matern_value<T: Real>(order: MaternOrder, variance: T, lam: T, r: T) -> T {
    let x = lam * r;
    let decay = (-x).exp();
    match order {
        MaternOrder::Half => variance * decay,
        MaternOrder::ThreeHalves => variance * (x + 1.0) * decay,
        MaternOrder::FiveHalves => variance * (x + 1.0 + x * x / 3.0) * decay,
    }
}

/// Stationary Matérn kernel at distance `r ≥ 0`.
pub fn matern_eval(spec: &KernelSpec, r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::domain(format!("distance must be non-negative, got {r}")));
    }
    Ok(matern_value(spec.order, spec.variance, spec.lambda(), r))
}

/// Value and partial derivatives `(k, ∂k/∂ℓ, ∂k/∂σ²)`.
pub fn matern_eval_grad(spec: &KernelSpec, r: f64) -> Result<(f64, f64, f64)> {
    if !(r >= 0.0) {
        return Err(Error::domain(format!("distance must be non-negative, got {r}")));
    }
    let ell = Dual::<2>::variable(spec.lengthscale, 0);
    let var = Dual::<2>::variable(spec.variance, 1);
    let lam = ell.recip() * spec.order.lambda_factor();
    let k = matern_value(spec.order, var, lam, Dual::constant(r));
    Ok((k.re, k.eps[0], k.eps[1]))
}

pub fn matern_gram(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> Result<DMatrix<f64>> {
    if x.iter().chain(x2).any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite input to matern_gram"));
    }
    let lam = spec.lambda();
    Ok(DMatrix::from_fn(x.len(), x2.len(), |i, j| {
        matern_value(spec.order, spec.variance, lam, (x[i] - x2[j]).abs())
    }))
}

/// Quartic blend across `γ = λ`: interpolates the generic form at
/// `γ = λ(1 + k h)`, `k ∈ {±1, ±2}`, together with the confluent value at `γ = λ`.
pub(crate) fn confluent_blend<T: Real>(
    lam: T,
    gam: T,
    generic: impl Fn(T) -> T,
    confluent: impl FnOnce() -> T,
) -> T {
    let rel = (gam - lam) / lam;
    if rel.re().abs() >= CONFLUENT_BAND {
        return generic(gam);
    }
    let h = CONFLUENT_BAND;
    let s = rel / h;
    const NODES: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let weight = |k: usize| {
        let mut w = T::from(1.0);
        for (j, &sj) in NODES.iter().enumerate() {
            if j != k {
                w = w * (s - sj) / (NODES[k] - sj);
            }
        }
        w
    };
    let mut out = weight(2) * confluent();
    for k in [0, 1, 3, 4] {
        out = out + weight(k) * generic(lam * (1.0 + NODES[k] * h));
    }
    out
}

pub(crate) fn lfm_value<T: Real>(order: MaternOrder, variance: T, lam: T, gam: T, beta: T, r: T) -> T {
    let b2 = beta * beta;
    let generic = |g: T| -> T {
        let d = g * g - lam * lam;
        let el = (-(lam * r)).exp();
        let eg = (-(g * r)).exp();
        match order {
            MaternOrder::Half => variance / (b2 * g * d) * (g * el - lam * eg),
            MaternOrder::ThreeHalves => {
                let l2 = lam * lam;
                variance / b2 * ((lam * r + 1.0) / d - l2 * 2.0 / (d * d)) * el
                    + l2 * lam * variance * 2.0 / (b2 * g * d * d) * eg
            }
            MaternOrder::FiveHalves => {
                let l2 = lam * lam;
                let d3 = d * d * d;
                variance / (b2 * 3.0)
                    * ((l2 * r * r + 3.0) / d
                        + lam * (g * g * 3.0 - l2 * 7.0) * r / (d * d)
                        + l2 * 4.0 * (l2 * 3.0 - g * g) / d3)
                    * el
                    - l2 * l2 * lam * variance * 8.0 / (b2 * g * d3 * 3.0) * eg
            }
        }
    };
    let confluent = || -> T {
        let x = lam * r;
        let el = (-x).exp();
        let denom = b2 * lam * lam;
        match order {
            MaternOrder::Half => variance * (x + 1.0) * el / (denom * 2.0),
            MaternOrder::ThreeHalves => variance * (x * x + x * 3.0 + 3.0) * el / (denom * 4.0),
            MaternOrder::FiveHalves => {
                variance * (x * x * x + x * x * 6.0 + x * 15.0 + 15.0) * el / (denom * 18.0)
            }
        }
    };
    confluent_blend(lam, gam, generic, confluent)
}

/// Closed-form LFM covariance `G∘k∘G` at lag `r ≥ 0`.
pub fn lfm_kernel_eval(kspec: &KernelSpec, ode: &OdeSpec, r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::domain(format!("distance must be non-negative, got {r}")));
    }
    Ok(lfm_value(kspec.order, kspec.variance, kspec.lambda(), ode.gamma(), ode.beta, r))
}

pub fn lfm_gram(kspec: &KernelSpec, ode: &OdeSpec, x: &[f64], x2: &[f64]) -> Result<DMatrix<f64>> {
    if x.iter().chain(x2).any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite input to lfm_gram"));
    }
    let (lam, gam) = (kspec.lambda(), ode.gamma());
    Ok(DMatrix::from_fn(x.len(), x2.len(), |i, j| {
        lfm_value(kspec.order, kspec.variance, lam, gam, ode.beta, (x[i] - x2[j]).abs())
    }))
}

/// Random frequencies `ω = ω'/ℓ`, `ω' ~ t_{2ν}`, for the random Fourier
/// feature approximation of the kernel.
pub fn spectral_sample<R: Rng + ?Sized>(kspec: &KernelSpec, count: usize, rng: &mut R) -> Vec<f64> {
    standard_spectral_sample(kspec.order, count, rng)
        .into_iter()
        .map(|w| w / kspec.lengthscale)
        .collect()
}

/// Unscaled draws `ω' ~ t_{2ν}`.
pub fn standard_spectral_sample<R: Rng + ?Sized>(order: MaternOrder, count: usize, rng: &mut R) -> Vec<f64> {
    let dist = StudentT::new(order.spectral_dof()).expect("positive degrees of freedom");
    (0..count).map(|_| dist.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn half(ell: f64) -> KernelSpec {
        KernelSpec::new(MaternOrder::Half, 1.0, ell).unwrap()
    }

    #[test]
    fn matern_examples() {
        assert_eq!(matern_eval(&half(0.2), 0.0).unwrap(), 1.0);
        assert_relative_eq!(matern_eval(&half(0.2), 0.2).unwrap(), (-1f64).exp(), epsilon = 1e-15);
        assert!(matern_eval(&half(0.2), -0.1).is_err());
    }

    #[test]
    fn matern_five_halves_term_by_term() {
        // σ²=2, ℓ=1, r=0.5: λr = √5/2
        let spec = KernelSpec::new(MaternOrder::FiveHalves, 2.0, 1.0).unwrap();
        let x = 5f64.sqrt() * 0.5;
        let expected = 2.0 * (1.0 + x + x * x / 3.0) * (-x).exp();
        assert_relative_eq!(matern_eval(&spec, 0.5).unwrap(), expected, max_relative = 1e-15);
        assert_relative_eq!(expected, 1.6572982848362506, max_relative = 1e-14);
    }

    #[test]
    fn matern_gram_examples() {
        let spec = KernelSpec::new(MaternOrder::Half, 3.0, 1.0).unwrap();
        let k = matern_gram(&spec, &[0.0], &[0.0]).unwrap();
        assert_eq!(k[(0, 0)], 3.0);
        let k = matern_gram(&spec, &[0.0, 1.0], &[0.0]).unwrap();
        assert_relative_eq!(k[(1, 0)], 3.0 * (-1f64).exp());
        assert!(matern_gram(&spec, &[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn lambda_parameterization() {
        for (order, f) in [
            (MaternOrder::Half, 1.0),
            (MaternOrder::ThreeHalves, 3f64.sqrt()),
            (MaternOrder::FiveHalves, 5f64.sqrt()),
        ] {
            let spec = KernelSpec::new(order, 1.0, 0.4).unwrap();
            assert_relative_eq!(spec.lambda(), f / 0.4);
        }
        assert!(KernelSpec::new(MaternOrder::Half, 0.0, 1.0).is_err());
        assert!(KernelSpec::new(MaternOrder::Half, 1.0, -1.0).is_err());
        assert!(OdeSpec::new(1.0, 0.0).is_err());
    }

    #[test]
    fn matern_gradients_match_finite_differences() {
        for order in MaternOrder::ALL {
            for r in [0.0, 0.3, 1.1] {
                let spec = KernelSpec::new(order, 1.7, 0.8).unwrap();
                let (_, d_ell, d_var) = matern_eval_grad(&spec, r).unwrap();
                let h = 1e-5;
                let f = |v: f64, l: f64| matern_eval(&KernelSpec::new(order, v, l).unwrap(), r).unwrap();
                let fd_ell = (f(1.7, 0.8 + h) - f(1.7, 0.8 - h)) / (2.0 * h);
                let fd_var = (f(1.7 + h, 0.8) - f(1.7 - h, 0.8)) / (2.0 * h);
                assert!((d_var - fd_var).abs() <= 1e-5 * fd_var.abs().max(1e-12));
                if r > 0.0 {
                    assert!((d_ell - fd_ell).abs() <= 1e-5 * fd_ell.abs(), "{order} {r}");
                } else {
                    assert_eq!(d_ell, 0.0);
                }
            }
        }
    }

    #[test]
    fn lfm_half_zero_lag() {
        let k = KernelSpec::with_lambda(MaternOrder::Half, 1.0, 5.0).unwrap();
        let ode = OdeSpec::new(4.0, 1.0).unwrap();
        assert_relative_eq!(lfm_kernel_eval(&k, &ode, 0.0).unwrap(), 1.0 / 36.0, max_relative = 1e-14);
        let ode = OdeSpec::new(5.0, 1.0).unwrap();
        assert_relative_eq!(lfm_kernel_eval(&k, &ode, 0.0).unwrap(), 0.02, max_relative = 1e-14);
    }

    #[test]
    fn lfm_reverts_to_matern_for_small_beta() {
        let k = half(0.2);
        let ode = OdeSpec::new(1.0, 1e-3).unwrap();
        for i in 0..=20 {
            let r = i as f64 * 0.05;
            let lfm = lfm_kernel_eval(&k, &ode, r).unwrap();
            let m = matern_eval(&k, r).unwrap();
            assert!(((lfm - m) / m).abs() < 1e-2, "r={r}: {lfm} vs {m}");
        }
    }

    #[test]
    fn lfm_continuous_across_confluence() {
        for order in MaternOrder::ALL {
            let k = KernelSpec::with_lambda(order, 1.3, 2.0).unwrap();
            for r in [0.0, 0.4, 2.0] {
                let at = |g: f64| lfm_kernel_eval(&k, &OdeSpec::new(g * 0.7, 0.7).unwrap(), r).unwrap();
                let c = at(2.0);
                let slope = lfm_value(
                    order,
                    Dual::<1>::constant(1.3),
                    Dual::constant(2.0),
                    Dual::variable(2.0, 0),
                    Dual::constant(0.7),
                    Dual::constant(r),
                )
                .eps[0];
                for g in [2.0 * (1.0 + 1e-5), 2.0 * (1.0 - 1e-5)] {
                    // the value moves linearly off the confluent point
                    let v = at(g);
                    let linear = c + slope * (g - 2.0);
                    assert!(((v - linear) / c).abs() < 1e-6, "{order} r={r}");
                }
                // continuity at the band edge
                let edge = 2.0 * (1.0 + CONFLUENT_BAND);
                let inside = at(edge * (1.0 - 1e-12));
                let outside = at(edge * (1.0 + 1e-12));
                assert!(((inside - outside) / outside).abs() < 1e-8, "{order} r={r}");
            }
        }
    }

    #[test]
    fn spectral_sample_is_deterministic() {
        let k = KernelSpec::new(MaternOrder::FiveHalves, 1.0, 0.5).unwrap();
        let a = spectral_sample(&k, 16, &mut ChaCha8Rng::seed_from_u64(3));
        let b = spectral_sample(&k, 16, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn spectral_median_near_zero() {
        let k = KernelSpec::new(MaternOrder::FiveHalves, 1.0, 1.0).unwrap();
        let mut w = spectral_sample(&k, 100_000, &mut ChaCha8Rng::seed_from_u64(11));
        w.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(w[50_000].abs() < 0.05);
    }

    #[test]
    fn half_order_samples_are_cauchy() {
        // quartiles of the standard Cauchy are ±1
        let k = half(1.0);
        let mut w = spectral_sample(&k, 200_000, &mut ChaCha8Rng::seed_from_u64(5));
        w.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((w[50_000] + 1.0).abs() < 0.03);
        assert!((w[150_000] - 1.0).abs() < 0.03);
    }
}
