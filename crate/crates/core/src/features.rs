//! Inter-domain Fourier features.
//!
//! The latent force `u` is projected onto the truncated Fourier basis
//! `{1, cos(z_m(t-a)), sin(z_m(t-a))}` through the Matérn RKHS inner product on
//! `[a, b]`. This module provides
//!
//! * the plain VFF cross-covariance `Cov[u(t), v_m]` ([`vff_eval`]), including its
//!   exponential extension outside the interval;
//! * the inducing Gram matrix `Cov[v_i, v_j] = ⟨φ_i, φ_j⟩_H` ([`kvv_gram`]);
//! * the response features `Cov[f(t), v_m] = ∫ G(t-τ) Cov[u(τ), v_m] dτ`
//!   ([`vfrf_eval`]) for the ODE output `f = G∘u`;
//! * the random Fourier response features used as a baseline ([`rfrf_eval`]).
//!
//! Basis layout: index `0` is the constant, `1..=M` the cosines and
//! `M+1..=2M` the sines, all with harmonic frequencies `z_m = 2πm/(b-a)`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::dual::Real;
use crate::error::{Error, Result};
use crate::kernels::{confluent_blend, KernelSpec, MaternOrder, OdeSpec};
use crate::quad;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub interval_a: f64,
    pub interval_b: f64,
    pub count: usize,
    pub frequencies: Vec<f64>,
}

/// One basis function; the constant is the `z = 0` cosine.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Basis {
    Constant,
    Cosine(f64),
    Sine(f64),
}

impl Basis {
    pub fn frequency(self) -> f64 {
        match self {
            Basis::Constant => 0.0,
            Basis::Cosine(z) | Basis::Sine(z) => z,
        }
    }

    /// `φ(t)` on `[a, b]`.
    pub fn eval(self, a: f64, t: f64) -> f64 {
        match self {
            Basis::Constant => 1.0,
            Basis::Cosine(z) => (z * (t - a)).cos(),
            Basis::Sine(z) => (z * (t - a)).sin(),
        }
    }
}

pub fn harmonic_frequencies(m: usize, a: f64, b: f64) -> Result<Vec<f64>> {
    if !(a < b) {
        return Err(Error::domain(format!("interval must satisfy a < b, got [{a}, {b}]")));
    }
    if m == 0 {
        return Err(Error::domain("frequency count must be at least 1"));
    }
    let base = 2.0 * std::f64::consts::PI / (b - a);
    Ok((1..=m).map(|k| base * k as f64).collect())
}

impl FeatureSet {
    pub fn new(a: f64, b: f64, m: usize) -> Result<Self> {
        Ok(Self { interval_a: a, interval_b: b, count: m, frequencies: harmonic_frequencies(m, a, b)? })
    }

    /// Number of basis functions, `2M + 1`.
    pub fn size(&self) -> usize {
        2 * self.count + 1
    }

    pub fn basis(&self, index: usize) -> Result<Basis> {
        let m = self.count;
        match index {
            0 => Ok(Basis::Constant),
            i if i <= m => Ok(Basis::Cosine(self.frequencies[i - 1])),
            i if i <= 2 * m => Ok(Basis::Sine(self.frequencies[i - m - 1])),
            _ => Err(Error::domain(format!("basis index {index} out of range 0..={}", 2 * m))),
        }
    }

    pub fn bases(&self) -> impl Iterator<Item = Basis> + '_ {
        (0..self.size()).map(move |i| self.basis(i).unwrap())
    }
}

/// Kernel, ODE and basis for one latent-force dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct VfrfContext {
    pub kernel: KernelSpec,
    pub ode: OdeSpec,
    pub features: FeatureSet,
}

impl VfrfContext {
    pub fn new(kernel: KernelSpec, ode: OdeSpec, features: FeatureSet) -> Self {
        Self { kernel, ode, features }
    }

    /// Phase shift `θ = -arctan(z/γ)` the ODE applies to a basis of frequency `z`.
    pub fn phase_shift(&self, z: f64) -> f64 {
        -(z / self.ode.gamma()).atan()
    }

    /// Amplitude `1/(β√(z²+γ²))` of the steady-state response.
    pub fn amplitude(&self, z: f64) -> f64 {
        let g = self.ode.gamma();
        1.0 / (self.ode.beta * (z * z + g * g).sqrt())
    }
}

pub(crate) fn vff_value<T: Real>(order: MaternOrder, basis: Basis, lam: T, a: f64, b: f64, t: T) -> T {
    let tr = t.re();
    if tr >= a && tr <= b {
        return match basis {
            Basis::Constant => T::from(1.0),
            Basis::Cosine(z) => ((t - a) * z).cos(),
            Basis::Sine(z) => ((t - a) * z).sin(),
        };
    }
    let left = tr < a;
    // signed offset from the nearest end and its magnitude
    let offset = if left { t - a } else { t - b };
    let r = offset.abs();
    let decay = (-(lam * r)).exp();
    let z = basis.frequency();
    let is_sine = matches!(basis, Basis::Sine(_));
    match order {
        MaternOrder::Half => {
            if is_sine {
                T::from(0.0)
            } else {
                decay
            }
        }
        MaternOrder::ThreeHalves => {
            if is_sine {
                offset * z * decay
            } else {
                (lam * r + 1.0) * decay
            }
        }
        MaternOrder::FiveHalves => {
            if is_sine {
                offset * z * (lam * r + 1.0) * decay
            } else {
                (lam * r + 1.0 - (-(lam * lam) + z * z) * r * r / 2.0) * decay
            }
        }
    }
}

/// `Cov[u(t), v_m]`: the basis function itself on `[a, b]`, its RKHS
/// extension outside.
pub fn vff_eval(kspec: &KernelSpec, fs: &FeatureSet, basis_index: usize, t: f64) -> Result<f64> {
    let basis = fs.basis(basis_index)?;
    Ok(vff_value(kspec.order, basis, kspec.lambda(), fs.interval_a, fs.interval_b, t))
}

/// Matérn-1/2 RKHS inner product on `[a, b]`,
/// `(1/2λσ²)∫(λg+g')(λh+h') + g(a)h(a)/σ²`, by quadrature.
///
/// `g` and `h` return `(value, first derivative)`.
pub fn rkhs_inner_half(
    kspec: &KernelSpec,
    fs: &FeatureSet,
    g: &dyn Fn(f64) -> (f64, f64),
    h: &dyn Fn(f64) -> (f64, f64),
) -> Result<f64> {
    if kspec.order != MaternOrder::Half {
        return Err(Error::UnsupportedOrder(format!(
            "rkhs_inner_half requires order 1/2, got {}",
            kspec.order
        )));
    }
    let lam = kspec.lambda();
    let s2 = kspec.variance;
    let (a, b) = (fs.interval_a, fs.interval_b);
    let integrand = |x: f64| {
        let (gv, gd) = g(x);
        let (hv, hd) = h(x);
        (lam * gv + gd) * (lam * hv + hd)
    };
    let integral = quad::integrate(integrand, a, b, &[], 1e-13, 1e-13, 1 << 14)?;
    Ok(integral.value / (2.0 * lam * s2) + g(a).0 * h(a).0 / s2)
}

/// Entries of `K_vv` (row-major), generic so that derivatives with respect to
/// `σ²` and `λ` can be carried along.
///
/// For the Matérn process with generator `(D + λ)^p`, `p = ν + ½`, the RKHS
/// norm on `[a, b]` is `x(a)ᵀ P∞⁻¹ x(a) + (1/q)∫ ((D+λ)^p g)²`, where `x(a)`
/// stacks `g` and its first `p-1` derivatives at `a`, `P∞` is their stationary
/// covariance and `q` the driving noise density. For harmonic frequencies the
/// integral term is diagonal in the basis.
pub(crate) fn kvv_entries<T: Real>(order: MaternOrder, variance: T, lam: T, fs: &FeatureSet) -> Vec<T> {
    let n = fs.size();
    let m = fs.count;
    let width = fs.interval_b - fs.interval_a;
    let l2 = lam * lam;
    let (power, q_inv) = match order {
        MaternOrder::Half => (1, (lam * variance * 2.0).recip()),
        MaternOrder::ThreeHalves => (2, (l2 * lam * variance * 4.0).recip()),
        MaternOrder::FiveHalves => (3, T::from(3.0) / (l2 * l2 * lam * variance * 16.0)),
    };
    let inv_var = variance.recip();

    // boundary state vectors (g(a), g'(a), g''(a))
    let state = |i: usize| -> [f64; 3] {
        if i == 0 {
            [1.0, 0.0, 0.0]
        } else if i <= m {
            let z = fs.frequencies[i - 1];
            [1.0, 0.0, -z * z]
        } else {
            let z = fs.frequencies[i - m - 1];
            [0.0, z, 0.0]
        }
    };
    let boundary = |x: [f64; 3], y: [f64; 3]| -> T {
        match order {
            MaternOrder::Half => inv_var * (x[0] * y[0]),
            MaternOrder::ThreeHalves => inv_var * (x[0] * y[0]) + inv_var / l2 * (x[1] * y[1]),
            MaternOrder::FiveHalves => {
                inv_var * (9.0 / 8.0 * x[0] * y[0])
                    + inv_var / (l2 * l2) * (9.0 / 8.0 * x[2] * y[2])
                    + inv_var / l2 * (3.0 / 8.0 * (x[0] * y[2] + x[2] * y[0]) + 3.0 * x[1] * y[1])
            }
        }
    };

    let mut k = vec![T::from(0.0); n * n];
    for i in 0..n {
        let si = state(i);
        for j in i..n {
            let v = boundary(si, state(j));
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
        let z = if i == 0 {
            0.0
        } else if i <= m {
            fs.frequencies[i - 1]
        } else {
            fs.frequencies[i - m - 1]
        };
        let spectral = (l2 + z * z).powi(power);
        let weight = if i == 0 { width } else { width / 2.0 };
        k[i * n + i] = k[i * n + i] + q_inv * spectral * weight;
    }
    k
}

/// Inducing Gram matrix `Cov[v_i, v_j] = ⟨φ_i, φ_j⟩_H`. Depends only on the
/// kernel and the basis, not on the ODE.
pub fn kvv_gram(ctx: &VfrfContext) -> DMatrix<f64> {
    let n = ctx.features.size();
    let entries = kvv_entries(ctx.kernel.order, ctx.kernel.variance, ctx.kernel.lambda(), &ctx.features);
    DMatrix::from_row_slice(n, n, &entries)
}

#[inline]
fn interior<T: Real>(basis: Basis, gam: T, beta: T, ra: T) -> T {
    let z = basis.frequency();
    let zz = gam * gam + z * z;
    let (c, s) = ((ra * z).cos(), (ra * z).sin());
    // cos(z r + θ)/(β√(z²+γ²)) and sin(z r + θ)/(β√(z²+γ²)) with θ = -atan(z/γ)
    match basis {
        Basis::Sine(_) => (gam * s - c * z) / (beta * zz),
        _ => (gam * c + s * z) / (beta * zz),
    }
}

/// Response feature `Cov[f(t), v_m] = ∫_{-∞}^t G(t-τ) Cov[u(τ), v_m] dτ`,
/// piecewise in `t` (left of, inside, right of `[a, b]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn vfrf_value<T: Real>(
    order: MaternOrder,
    basis: Basis,
    lam: T,
    gam: T,
    beta: T,
    a: f64,
    b: f64,
    t: T,
) -> T {
    let tr = t.re();
    let z = basis.frequency();
    let sine = matches!(basis, Basis::Sine(_));
    let zero = T::from(0.0);
    let exp = |x: T| (-x).exp();

    if tr < a {
        let ra = -(t - a);
        let gl = gam + lam;
        let el = exp(lam * ra);
        return match (order, sine) {
            (MaternOrder::Half, false) => el / (beta * gl),
            (MaternOrder::Half, true) => zero,
            (MaternOrder::ThreeHalves, false) => ((lam * ra + 1.0) / (beta * gl) + lam / (beta * gl * gl)) * el,
            (MaternOrder::ThreeHalves, true) => -(ra / gl + (gl * gl).recip()) * z / beta * el,
            (MaternOrder::FiveHalves, false) => {
                let c = -(gam * gam) - gam * lam * 3.0 - lam * lam * 3.0 + z * z;
                -((-(lam * lam) + z * z) * ra * ra / (beta * gl * 2.0)
                    + (-(gam * lam) - lam * lam * 2.0 + z * z) * ra / (beta * gl * gl)
                    + c / (beta * gl * gl * gl))
                    * el
            }
            (MaternOrder::FiveHalves, true) => {
                let g3 = gam + lam * 3.0;
                -(lam * ra * ra / gl + g3 * ra / (gl * gl) + g3 / (gl * gl * gl)) * z / beta * el
            }
        };
    }

    let ra = t - a;
    // coefficient of e^{-γ r_a}, shared by the interior and right-hand pieces
    let ra_coeff = |g: T| -> T {
        let zz = g * g + z * z;
        let gl = g + lam;
        match (order, sine) {
            (MaternOrder::Half, false) => -(g / (beta * zz) - (beta * gl).recip()),
            (MaternOrder::Half, true) => (beta * zz).recip() * z,
            (MaternOrder::ThreeHalves, false) => -(g / (beta * zz) - (g + lam * 2.0) / (beta * gl * gl)),
            (MaternOrder::ThreeHalves, true) => (zz.recip() - (gl * gl).recip()) * z / beta,
            (MaternOrder::FiveHalves, false) => {
                let c = -(g * g) - g * lam * 3.0 - lam * lam * 3.0 + z * z;
                -(c / (beta * gl * gl * gl) + g / (beta * zz))
            }
            (MaternOrder::FiveHalves, true) => (zz.recip() - (g + lam * 3.0) / (gl * gl * gl)) * z / beta,
        }
    };

    if tr <= b {
        return interior(basis, gam, beta, ra) + ra_coeff(gam) * exp(gam * ra);
    }

    let rb = t - b;
    let generic = |g: T| -> T {
        let zz = g * g + z * z;
        let gm = g - lam;
        let first = ra_coeff(g) * exp(g * ra);
        let (cb, cl) = match (order, sine) {
            (MaternOrder::Half, false) => (g / (beta * zz) - (beta * gm).recip(), (beta * gm).recip()),
            (MaternOrder::Half, true) => (-(beta * zz).recip() * z, zero),
            (MaternOrder::ThreeHalves, false) => (
                g / (beta * zz) - (g - lam * 2.0) / (beta * gm * gm),
                (lam * rb + 1.0) / (beta * gm) - lam / (beta * gm * gm),
            ),
            (MaternOrder::ThreeHalves, true) => (
                -(zz.recip() - (gm * gm).recip()) * z / beta,
                (rb / gm - (gm * gm).recip()) * z / beta,
            ),
            (MaternOrder::FiveHalves, false) => {
                let d = -(g * g) + g * lam * 3.0 - lam * lam * 3.0 + z * z;
                let g3 = gm * gm * gm;
                (
                    d / (beta * g3) + g / (beta * zz),
                    -((-(lam * lam) + z * z) * rb * rb / (beta * gm * 2.0)
                        - (g * lam - lam * lam * 2.0 + z * z) * rb / (beta * gm * gm)
                        + d / (beta * g3)),
                )
            }
            (MaternOrder::FiveHalves, true) => {
                let g3 = g - lam * 3.0;
                let gm3 = gm * gm * gm;
                (
                    -(zz.recip() - g3 / gm3) * z / beta,
                    (lam * rb * rb / gm + g3 * rb / (gm * gm) - g3 / gm3) * z / beta,
                )
            }
        };
        first + cb * exp(g * rb) + cl * exp(lam * rb)
    };
    if sine && order == MaternOrder::Half {
        // no λ-dependence, hence no confluent singularity
        return generic(gam);
    }
    let confluent = || -> T {
        let zz = lam * lam + z * z;
        let (l2, l3) = (lam * lam, lam * lam * lam);
        let (ca, cb) = match (order, sine) {
            (MaternOrder::Half, false) => (
                -(lam / (beta * zz) - (beta * lam * 2.0).recip()),
                lam / (beta * zz) + rb / beta,
            ),
            (MaternOrder::Half, true) => unreachable!(),
            (MaternOrder::ThreeHalves, false) => (
                -(lam / (beta * zz) - T::from(3.0) / (beta * lam * 4.0)),
                lam / (beta * zz) + (lam * rb + 2.0) * rb / (beta * 2.0),
            ),
            (MaternOrder::ThreeHalves, true) => (
                (zz.recip() - (l2 * 4.0).recip()) * z / beta,
                (-zz.recip() + rb * rb / 2.0) * z / beta,
            ),
            (MaternOrder::FiveHalves, false) => (
                -((-(l2 * 7.0) + z * z) / (beta * l3 * 8.0) + lam / (beta * zz)),
                lam / (beta * zz) - ((-l2 + z * z) * rb * rb - lam * rb * 3.0 - 6.0) * rb / (beta * 6.0),
            ),
            (MaternOrder::FiveHalves, true) => (
                (zz.recip() - (l2 * 2.0).recip()) * z / beta,
                -(zz.recip() - (lam * rb * 2.0 + 3.0) * rb * rb / 6.0) * z / beta,
            ),
        };
        ca * exp(lam * ra) + cb * exp(lam * rb)
    };
    confluent_blend(lam, gam, generic, confluent)
}

/// Closed-form response feature for basis `basis_index` at `t ∈ ℝ`.
pub fn vfrf_eval(ctx: &VfrfContext, basis_index: usize, t: f64) -> Result<f64> {
    let basis = ctx.features.basis(basis_index)?;
    if !t.is_finite() {
        return Err(Error::domain(format!("non-finite input {t}")));
    }
    Ok(vfrf_value(
        ctx.kernel.order,
        basis,
        ctx.kernel.lambda(),
        ctx.ode.gamma(),
        ctx.ode.beta,
        ctx.features.interval_a,
        ctx.features.interval_b,
        t,
    ))
}

/// `K_fv`: row `i`, column `m` is `vfrf_eval(ctx, m, t_i)`.
pub fn kfv_matrix(ctx: &VfrfContext, ts: &[f64]) -> Result<DMatrix<f64>> {
    if let Some(t) = ts.iter().find(|t| !t.is_finite()) {
        return Err(Error::domain(format!("non-finite input {t}")));
    }
    let bases: Vec<Basis> = ctx.features.bases().collect();
    let (lam, gam, beta) = (ctx.kernel.lambda(), ctx.ode.gamma(), ctx.ode.beta);
    let (a, b) = (ctx.features.interval_a, ctx.features.interval_b);
    Ok(DMatrix::from_fn(ts.len(), bases.len(), |i, m| {
        vfrf_value(ctx.kernel.order, bases[m], lam, gam, beta, a, b, ts[i])
    }))
}

/// Random Fourier response feature `e^{jωt}/(β(γ + jω))`.
pub fn rfrf_eval(ode: &OdeSpec, omega: f64, t: f64) -> Complex64 {
    Complex64::new(0.0, omega * t).exp() / (ode.beta * Complex64::new(ode.gamma(), omega))
}

/// Monte Carlo estimate `(σ²/M) Σ Re[φ(t; ω_m) conj(φ(t'; ω_m))]` of the LFM kernel.
pub fn rff_kernel_approx(kspec: &KernelSpec, ode: &OdeSpec, omegas: &[f64], t: f64, t2: f64) -> f64 {
    if omegas.is_empty() {
        return 0.0;
    }
    let sum: f64 = omegas
        .iter()
        .map(|&w| (rfrf_eval(ode, w, t) * rfrf_eval(ode, w, t2).conj()).re)
        .sum();
    kspec.variance * sum / omegas.len() as f64
}

/// Real feature vector `√(σ²/M)[Re φ(t; ω_m), Im φ(t; ω_m)]` whose inner
/// products reproduce [`rff_kernel_approx`]. `base` holds the unscaled
/// frequencies `ω'`, so `ω = ω'/ℓ`.
pub(crate) fn rff_feature_values<T: Real>(
    base: &[f64],
    variance: T,
    lengthscale: T,
    gam: T,
    beta: T,
    t: T,
    out: &mut [T],
) {
    let m = base.len();
    let scale = (variance / m as f64).sqrt();
    for (k, &w0) in base.iter().enumerate() {
        let w = lengthscale.recip() * w0;
        let denom = beta * (gam * gam + w * w);
        let (c, s) = ((w * t).cos(), (w * t).sin());
        out[k] = scale * (gam * c + w * s) / denom;
        out[m + k] = scale * (gam * s - w * c) / denom;
    }
}

/// Prior variance of the random-feature process, `(σ²/M) Σ 1/(β²(γ²+ω²))`.
pub(crate) fn rff_prior_variance<T: Real>(base: &[f64], variance: T, lengthscale: T, gam: T, beta: T) -> T {
    let mut acc = T::from(0.0);
    for &w0 in base {
        let w = lengthscale.recip() * w0;
        acc = acc + (beta * beta * (gam * gam + w * w)).recip();
    }
    acc * variance / base.len() as f64
}
