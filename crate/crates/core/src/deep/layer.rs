//! One layer of the compositional model: `out_dim` independent GPs, each the
//! sum over input dimensions of one-dimensional latent-force GPs with their
//! own inducing features.

use nalgebra::{DMatrix, DVector, SVD};

use crate::dual::{Dual, Real};
use crate::error::{Error, Result};
use crate::features::{
    kvv_entries, rff_feature_values, rff_prior_variance, vff_value, vfrf_value, Basis, FeatureSet, VfrfContext,
};
use crate::kernels::{lfm_gram, lfm_value, matern_gram, KernelSpec, MaternOrder, OdeSpec};
use crate::linalg::KVV_JITTER;

/// Which inducing features a layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    /// Fourier response features of the ODE-filtered process.
    Vfrf,
    /// Plain Fourier features of a Matérn GP (no ODE).
    Vff,
    /// Random Fourier response features with an identity prior over weights.
    Rff,
}

impl FeatureKind {
    pub fn label(self) -> &'static str {
        match self {
            FeatureKind::Vfrf => "vfrf",
            FeatureKind::Vff => "vff",
            FeatureKind::Rff => "rff",
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vfrf" => Ok(FeatureKind::Vfrf),
            "vff" => Ok(FeatureKind::Vff),
            "rff" => Ok(FeatureKind::Rff),
            other => Err(Error::Parse(format!("unknown feature kind '{other}' (expected vfrf, vff or rff)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MeanMode {
    ZeroMean,
    /// `g(t) += tᵀW` with a frozen `in_dim × out_dim` weight matrix.
    FixedLinear(DMatrix<f64>),
}

/// Unconstrained (log) hyperparameters of one input dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DimParams {
    pub log_lengthscale: f64,
    pub log_variance: f64,
    pub log_alpha: f64,
    pub log_beta: f64,
}

impl DimParams {
    pub fn new(lengthscale: f64, variance: f64, alpha: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("lengthscale", lengthscale), ("variance", variance), ("alpha", alpha), ("beta", beta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self {
            log_lengthscale: lengthscale.ln(),
            log_variance: variance.ln(),
            log_alpha: alpha.ln(),
            log_beta: beta.ln(),
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.log_lengthscale, self.log_variance, self.log_alpha, self.log_beta]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self { log_lengthscale: v[0], log_variance: v[1], log_alpha: v[2], log_beta: v[3] }
    }

    pub fn kernel(&self, order: MaternOrder) -> Result<KernelSpec> {
        KernelSpec::new(order, self.log_variance.exp(), self.log_lengthscale.exp())
    }

    pub fn ode(&self) -> Result<OdeSpec> {
        OdeSpec::new(self.log_alpha.exp(), self.log_beta.exp())
    }
}

/// Names of the four per-dimension hyperparameters, in storage order.
pub const DIM_PARAM_NAMES: [&str; 4] = ["log_lengthscale", "log_variance", "log_alpha", "log_beta"];

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub order: MaternOrder,
    pub kind: FeatureKind,
    /// Harmonic basis (for RFF layers only `count` is used, as the number of frequencies).
    pub features: FeatureSet,
    /// Unscaled frequencies `ω' ~ t_{2ν}` per input dimension (RFF layers only).
    pub rff_base: Vec<Vec<f64>>,
    pub dims: Vec<DimParams>,
    pub mean: MeanMode,
    /// Variational means, one per output dimension.
    pub q_mean: Vec<DVector<f64>>,
    /// Lower-triangular covariance factors, one per output dimension.
    pub q_chol: Vec<DMatrix<f64>>,
}

impl Layer {
    /// Number of features per input dimension.
    pub fn block_size(&self) -> usize {
        match self.kind {
            FeatureKind::Rff => 2 * self.features.count,
            _ => self.features.size(),
        }
    }

    /// Inducing variables per output GP.
    pub fn num_inducing(&self) -> usize {
        self.block_size() * self.in_dim
    }

    pub fn context(&self, d: usize) -> Result<VfrfContext> {
        let p = self.dims.get(d).ok_or_else(|| Error::domain(format!("input dimension {d} out of range")))?;
        Ok(VfrfContext::new(p.kernel(self.order)?, p.ode()?, self.features.clone()))
    }

    pub fn contexts(&self) -> Result<Vec<VfrfContext>> {
        (0..self.in_dim).map(|d| self.context(d)).collect()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let p = self.num_inducing();
        if self.dims.len() != self.in_dim {
            return Err(Error::Dimension(format!("{} dimension parameter sets for in_dim {}", self.dims.len(), self.in_dim)));
        }
        if self.q_mean.len() != self.out_dim || self.q_chol.len() != self.out_dim {
            return Err(Error::Dimension("one variational state per output dimension required".into()));
        }
        if self.q_mean.iter().any(|m| m.len() != p) || self.q_chol.iter().any(|l| l.shape() != (p, p)) {
            return Err(Error::Dimension(format!("variational states must have dimension {p}")));
        }
        if let MeanMode::FixedLinear(w) = &self.mean {
            if w.shape() != (self.in_dim, self.out_dim) {
                return Err(Error::Dimension(format!("mean weights are {}x{}, expected {}x{}", w.nrows(), w.ncols(), self.in_dim, self.out_dim)));
            }
        }
        if self.kind == FeatureKind::Rff
            && (self.rff_base.len() != self.in_dim || self.rff_base.iter().any(|b| b.len() != self.features.count))
        {
            return Err(Error::Dimension("random frequencies missing for some input dimension".into()));
        }
        Ok(())
    }
}

/// Feature values at a batch of scalar inputs with partials along
/// `log ℓ`, `log σ²`, `log α`, `log β` and the input itself.
#[derive(Clone, Debug)]
pub(crate) struct FeatureBlock {
    pub values: DMatrix<f64>,
    pub d_ell: DMatrix<f64>,
    pub d_var: DMatrix<f64>,
    pub d_alpha: DMatrix<f64>,
    pub d_beta: DMatrix<f64>,
    pub d_t: DMatrix<f64>,
}

type D4 = Dual<4>;

fn seeded(value: f64, slot: usize) -> D4 {
    let mut d = D4::constant(value);
    d.eps[slot] = value;
    d
}

pub(crate) fn feature_block(layer: &Layer, d: usize, t: &[f64], with_grad: bool) -> FeatureBlock {
    let f = layer.block_size();
    let n = t.len();
    let p = layer.dims[d];
    let mut block = FeatureBlock {
        values: DMatrix::zeros(n, f),
        d_ell: DMatrix::zeros(0, 0),
        d_var: DMatrix::zeros(0, 0),
        d_alpha: DMatrix::zeros(0, 0),
        d_beta: DMatrix::zeros(0, 0),
        d_t: DMatrix::zeros(0, 0),
    };
    if with_grad {
        for m in [&mut block.d_ell, &mut block.d_var, &mut block.d_alpha, &mut block.d_beta, &mut block.d_t] {
            *m = DMatrix::zeros(n, f);
        }
    }
    let fs = &layer.features;
    let (a, b) = (fs.interval_a, fs.interval_b);
    // directions: 0 = log ℓ, 1 = log α, 2 = log β, 3 = t
    let ell = p.log_lengthscale.exp();
    let lam_re = layer.order.lambda_factor() / ell;
    let mut lam = D4::constant(lam_re);
    lam.eps[0] = -lam_re;
    let alpha = seeded(p.log_alpha.exp(), 1);
    let beta = seeded(p.log_beta.exp(), 2);
    let gam = alpha / beta;
    let bases: Vec<Basis> = fs.bases().collect();
    let mut rff_out = vec![D4::constant(0.0); f];
    for (i, &ti) in t.iter().enumerate() {
        if with_grad {
            let tt = D4::variable(ti, 3);
            let mut put = |m: usize, v: D4| {
                block.values[(i, m)] = v.re;
                block.d_ell[(i, m)] = v.eps[0];
                block.d_alpha[(i, m)] = v.eps[1];
                block.d_beta[(i, m)] = v.eps[2];
                block.d_t[(i, m)] = v.eps[3];
            };
            match layer.kind {
                FeatureKind::Vfrf => {
                    for (m, &basis) in bases.iter().enumerate() {
                        put(m, vfrf_value(layer.order, basis, lam, gam, beta, a, b, tt));
                    }
                }
                FeatureKind::Vff => {
                    for (m, &basis) in bases.iter().enumerate() {
                        put(m, vff_value(layer.order, basis, lam, a, b, tt));
                    }
                }
                FeatureKind::Rff => {
                    let var = D4::constant(p.log_variance.exp());
                    let ell_d = seeded(ell, 0);
                    rff_feature_values(&layer.rff_base[d], var, ell_d, gam, beta, tt, &mut rff_out);
                    for (m, &v) in rff_out.iter().enumerate() {
                        put(m, v);
                        block.d_var[(i, m)] = 0.5 * v.re;
                    }
                }
            }
        } else {
            let (lam, gam, beta) = (lam.re, gam.re, beta.re);
            match layer.kind {
                FeatureKind::Vfrf => {
                    for (m, &basis) in bases.iter().enumerate() {
                        block.values[(i, m)] = vfrf_value(layer.order, basis, lam, gam, beta, a, b, ti);
                    }
                }
                FeatureKind::Vff => {
                    for (m, &basis) in bases.iter().enumerate() {
                        block.values[(i, m)] = vff_value(layer.order, basis, lam, a, b, ti);
                    }
                }
                FeatureKind::Rff => {
                    let mut out = vec![0.0; f];
                    rff_feature_values(&layer.rff_base[d], p.log_variance.exp(), ell, gam, beta, ti, &mut out);
                    for (m, v) in out.into_iter().enumerate() {
                        block.values[(i, m)] = v;
                    }
                }
            }
        }
    }
    block
}

/// Jittered `K_vv` block of one input dimension with its partials along
/// `log ℓ` and `log σ²` (`None` for RFF layers, whose prior is the identity).
pub(crate) struct KvvBlock {
    pub k: DMatrix<f64>,
    pub d_ell: DMatrix<f64>,
    pub d_var: DMatrix<f64>,
}

pub(crate) fn kvv_block(layer: &Layer, d: usize) -> Option<KvvBlock> {
    if layer.kind == FeatureKind::Rff {
        return None;
    }
    let p = layer.dims[d];
    let lam_re = layer.order.lambda_factor() / p.log_lengthscale.exp();
    let lam = Dual::<2> { re: lam_re, eps: [-lam_re, 0.0] };
    let s2 = p.log_variance.exp();
    let var = Dual::<2> { re: s2, eps: [0.0, s2] };
    let entries = kvv_entries(layer.order, var, lam, &layer.features);
    let n = layer.features.size();
    let scale = |i: usize, j: usize| if i == j { 1.0 + KVV_JITTER } else { 1.0 };
    Some(KvvBlock {
        k: DMatrix::from_fn(n, n, |i, j| entries[i * n + j].re * scale(i, j)),
        d_ell: DMatrix::from_fn(n, n, |i, j| entries[i * n + j].eps[0] * scale(i, j)),
        d_var: DMatrix::from_fn(n, n, |i, j| entries[i * n + j].eps[1] * scale(i, j)),
    })
}

/// Prior variance `k_d(t, t)` of one input dimension and its partials along
/// `(log ℓ, log σ², log α, log β)`.
pub(crate) fn prior_variance(layer: &Layer, d: usize) -> (f64, [f64; 4]) {
    let p = layer.dims[d];
    let ell = seeded(p.log_lengthscale.exp(), 0);
    let var = seeded(p.log_variance.exp(), 1);
    let alpha = seeded(p.log_alpha.exp(), 2);
    let beta = seeded(p.log_beta.exp(), 3);
    let gam = alpha / beta;
    let v = match layer.kind {
        FeatureKind::Vfrf => {
            let lam = ell.recip() * layer.order.lambda_factor();
            lfm_value(layer.order, var, lam, gam, beta, D4::constant(0.0))
        }
        FeatureKind::Vff => var,
        FeatureKind::Rff => rff_prior_variance(&layer.rff_base[d], var, ell, gam, beta),
    };
    (v.re, v.eps)
}

/// Additive covariances of a layer at a batch of inputs (rows of `t`).
#[derive(Clone, Debug)]
pub struct LayerCovariances {
    /// `[K_fv^{(1)} … K_fv^{(D)}]`, `B × (F·D)`.
    pub kfv: DMatrix<f64>,
    /// Block-diagonal `K_vv` (without jitter); blocks for different input
    /// dimensions are zero.
    pub kvv: DMatrix<f64>,
    /// Prior variance `Σ_d k_d(0)` of each output GP.
    pub prior_variance: f64,
}

pub fn additive_layer_covariances(layer: &Layer, t: &DMatrix<f64>) -> Result<LayerCovariances> {
    layer.validate()?;
    if t.ncols() != layer.in_dim {
        return Err(Error::Dimension(format!("inputs have {} columns, layer expects {}", t.ncols(), layer.in_dim)));
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite layer input"));
    }
    let f = layer.block_size();
    let p = layer.num_inducing();
    let mut kfv = DMatrix::zeros(t.nrows(), p);
    let mut kvv = DMatrix::zeros(p, p);
    let mut prior = 0.0;
    for d in 0..layer.in_dim {
        let col: Vec<f64> = t.column(d).iter().copied().collect();
        kfv.columns_mut(d * f, f).copy_from(&feature_block(layer, d, &col, false).values);
        match kvv_block(layer, d) {
            Some(kb) => {
                let raw = kb.k.map_with_location(|i, j, v| if i == j { v / (1.0 + KVV_JITTER) } else { v });
                kvv.view_mut((d * f, d * f), (f, f)).copy_from(&raw);
            }
            None => kvv.view_mut((d * f, d * f), (f, f)).fill_with_identity(),
        }
        prior += prior_variance(layer, d).0;
    }
    Ok(LayerCovariances { kfv, kvv, prior_variance: prior })
}

/// Full prior Gram `Σ_d k_d(t_d, t'_d)` of one output GP of the layer.
pub fn additive_prior_gram(layer: &Layer, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = t.nrows();
    let mut k = DMatrix::zeros(n, n);
    for d in 0..layer.in_dim {
        let col: Vec<f64> = t.column(d).iter().copied().collect();
        let p = &layer.dims[d];
        let kd = match layer.kind {
            FeatureKind::Vfrf => lfm_gram(&p.kernel(layer.order)?, &p.ode()?, &col, &col)?,
            FeatureKind::Vff => matern_gram(&p.kernel(layer.order)?, &col, &col)?,
            FeatureKind::Rff => {
                let blk = feature_block(layer, d, &col, false).values;
                &blk * blk.transpose()
            }
        };
        k += kd;
    }
    Ok(k)
}

/// Frozen linear mean weights for an inner layer (`in_dim × out_dim`).
///
/// Equal widths give the identity. A narrowing layer projects onto the
/// leading right-singular vectors of its training inputs, completed with an
/// orthonormal complement when the inputs have too few singular directions.
/// A widening layer copies the inputs into the first `in_dim` outputs.
pub fn fixed_linear_mean(train_inputs: &DMatrix<f64>, in_dim: usize, out_dim: usize) -> Result<DMatrix<f64>> {
    if train_inputs.ncols() != in_dim {
        return Err(Error::Dimension(format!("inputs have {} columns, expected {in_dim}", train_inputs.ncols())));
    }
    if in_dim == 0 || out_dim == 0 {
        return Err(Error::domain("layer widths must be positive"));
    }
    if in_dim == out_dim {
        return Ok(DMatrix::identity(in_dim, in_dim));
    }
    if out_dim > in_dim {
        let mut w = DMatrix::zeros(in_dim, out_dim);
        w.view_mut((0, 0), (in_dim, in_dim)).fill_with_identity();
        return Ok(w);
    }
    let svd = SVD::new(train_inputs.clone(), false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::numerical("SVD did not return singular vectors"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].partial_cmp(&svd.singular_values[i]).unwrap());
    let tol = svd.singular_values.max() * 1e-12 * in_dim.max(train_inputs.nrows()) as f64;
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(out_dim);
    for &i in &order {
        if cols.len() == out_dim || svd.singular_values[i] <= tol {
            break;
        }
        cols.push(v_t.row(i).transpose().normalize());
    }
    // orthonormal completion from the standard basis (Gram–Schmidt)
    let mut e = 0;
    while cols.len() < out_dim && e < in_dim {
        let mut v = DVector::zeros(in_dim);
        v[e] = 1.0;
        for _ in 0..2 {
            for c in &cols {
                let proj = c.dot(&v);
                v -= c * proj;
            }
        }
        if v.norm() > 1e-8 {
            cols.push(v.normalize());
        }
        e += 1;
    }
    Ok(DMatrix::from_columns(&cols))
}
