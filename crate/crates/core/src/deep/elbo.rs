//! Doubly stochastic evidence lower bound and its exact gradient.
//!
//! Hidden layers are sampled marginally with the reparameterization
//! `g = μ + √v ε`; the outer layer's expected Gaussian log-likelihood is
//! taken in closed form. The reverse pass is written at the matrix level:
//! for an output GP with `J = K_vv⁻¹`, `Σ̃ = J S J − J`,
//!
//! * `mean = K_fv J m`, `var = k_ff + diag(K_fv Σ̃ K_vf)`;
//! * `∂/∂K_fv = dμ (Jm)ᵀ + 2 diag(dv) K_fv Σ̃`;
//! * with `C = K_vfdiag(dv)K_fv` and `u = K_vf dμ`:
//!   `∂/∂J = u mᵀ + C J S + S J C − C`, `∂/∂S = J C J`, `∂/∂m = J u`,
//!   `∂/∂K_vv = −J (∂/∂J) J`.
//!
//! `u` and `C` are linear in the upstream adjoints, so they are accumulated
//! over samples and the cubic-cost terms are formed once per evaluation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layer::{feature_block, kvv_block, prior_variance, FeatureBlock, FeatureKind, KvvBlock, Layer, MeanMode};
use super::model::DeepModel;
use crate::error::{Error, Result};
use crate::linalg::{lower_triangle, robust_cholesky};

/// Hidden-layer variances below this are floored before taking the square
/// root; the floored branch carries no gradient.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Standard-normal draws for hidden-layer sampling: `draws[s][l]` is the
/// `batch × out_dim` noise of hidden layer `l` in sample path `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleNoise {
    pub draws: Vec<Vec<DMatrix<f64>>>,
}

impl SampleNoise {
    pub fn draw<R: Rng + ?Sized>(model: &DeepModel, batch: usize, samples: usize, rng: &mut R) -> Self {
        let hidden = &model.layers[..model.layers.len() - 1];
        let draws = (0..samples)
            .map(|_| {
                hidden
                    .iter()
                    .map(|l| DMatrix::from_fn(batch, l.out_dim, |_, _| StandardNormal.sample(rng)))
                    .collect()
            })
            .collect();
        Self { draws }
    }

    pub fn zeros(model: &DeepModel, batch: usize, samples: usize) -> Self {
        let hidden = &model.layers[..model.layers.len() - 1];
        Self { draws: (0..samples).map(|_| hidden.iter().map(|l| DMatrix::zeros(batch, l.out_dim)).collect()).collect() }
    }

    pub fn samples(&self) -> usize {
        self.draws.len()
    }
}

struct OutCache {
    jm: DVector<f64>,
    js: DMatrix<f64>,
    sig: DMatrix<f64>,
}

/// Step-constant quantities of one layer.
struct LayerCache {
    j: DMatrix<f64>,
    logdet_kvv: f64,
    kff: f64,
    kvv: Vec<Option<KvvBlock>>,
    kff_partials: Vec<[f64; 4]>,
    outs: Vec<OutCache>,
}

fn prepare(layer: &Layer, l: usize) -> Result<LayerCache> {
    let f = layer.block_size();
    let p = layer.num_inducing();
    let mut j = DMatrix::zeros(p, p);
    let mut logdet = 0.0;
    let mut kvv = Vec::with_capacity(layer.in_dim);
    let mut kff = 0.0;
    let mut kff_partials = Vec::with_capacity(layer.in_dim);
    for d in 0..layer.in_dim {
        let (v, dv) = prior_variance(layer, d);
        kff += v;
        kff_partials.push(dv);
        match kvv_block(layer, d) {
            Some(mut kb) => {
                let factor = robust_cholesky(&kb.k, 0.0)
                    .map_err(|e| Error::numerical(format!("layer {l}, input {d}: K_vv factorization: {e}")))?;
                if factor.jitter > 0.0 {
                    for i in 0..f {
                        kb.k[(i, i)] *= 1.0 + factor.jitter;
                        kb.d_ell[(i, i)] *= 1.0 + factor.jitter;
                        kb.d_var[(i, i)] *= 1.0 + factor.jitter;
                    }
                }
                logdet += factor.log_det();
                j.view_mut((d * f, d * f), (f, f)).copy_from(&factor.inverse());
                kvv.push(Some(kb));
            }
            None => {
                j.view_mut((d * f, d * f), (f, f)).fill_with_identity();
                kvv.push(None);
            }
        }
    }
    let outs = (0..layer.out_dim)
        .map(|r| {
            let lq = &layer.q_chol[r];
            let s = lq * lq.transpose();
            let js = &j * &s;
            let sig = &js * &j - &j;
            OutCache { jm: &j * &layer.q_mean[r], js, sig }
        })
        .collect();
    Ok(LayerCache { j, logdet_kvv: logdet, kff, kvv, kff_partials, outs })
}

/// Forward quantities of one layer at one set of inputs.
struct LayerPass {
    blocks: Vec<FeatureBlock>,
    kfv: DMatrix<f64>,
    /// GP mean plus the layer's mean function, `B × out`.
    mu: DMatrix<f64>,
    /// GP variance, `B × out`.
    var: DMatrix<f64>,
    /// `K_fv Σ̃_r` per output.
    ks: Vec<DMatrix<f64>>,
}

fn forward(layer: &Layer, cache: &LayerCache, h: &DMatrix<f64>, with_grad: bool, l: usize) -> Result<LayerPass> {
    let b = h.nrows();
    let f = layer.block_size();
    let mut kfv = DMatrix::zeros(b, layer.num_inducing());
    let mut blocks = Vec::with_capacity(layer.in_dim);
    for d in 0..layer.in_dim {
        let col: Vec<f64> = h.column(d).iter().copied().collect();
        let blk = feature_block(layer, d, &col, with_grad);
        kfv.columns_mut(d * f, f).copy_from(&blk.values);
        blocks.push(blk);
    }
    let mut mu = DMatrix::zeros(b, layer.out_dim);
    let mut var = DMatrix::zeros(b, layer.out_dim);
    let mut ks = Vec::with_capacity(layer.out_dim);
    for (r, oc) in cache.outs.iter().enumerate() {
        let k_sig = &kfv * &oc.sig;
        mu.set_column(r, &(&kfv * &oc.jm));
        for i in 0..b {
            var[(i, r)] = cache.kff + k_sig.row(i).dot(&kfv.row(i));
        }
        ks.push(k_sig);
    }
    if let MeanMode::FixedLinear(w) = &layer.mean {
        mu += h * w;
    }
    if mu.iter().chain(var.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("non-finite predictive moments in layer {l}")));
    }
    if let Some(v) = var.iter().copied().find(|v| *v < -1e-6 * cache.kff.max(1.0)) {
        return Err(Error::numerical(format!("negative predictive variance {v:e} in layer {l}")));
    }
    Ok(LayerPass { blocks, kfv, mu, var, ks })
}

fn sample(pass: &LayerPass, eps: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(pass.mu.nrows(), pass.mu.ncols(), |i, r| {
        pass.mu[(i, r)] + pass.var[(i, r)].max(VARIANCE_FLOOR).sqrt() * eps[(i, r)]
    })
}

/// Adjoints of `μ` and `v` given the adjoint of the sampled output.
fn sample_adjoint(pass: &LayerPass, eps: &DMatrix<f64>, dout: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let dvar = DMatrix::from_fn(dout.nrows(), dout.ncols(), |i, r| {
        let v = pass.var[(i, r)];
        if v > VARIANCE_FLOOR {
            dout[(i, r)] * eps[(i, r)] / (2.0 * v.sqrt())
        } else {
            0.0
        }
    });
    (dout.clone(), dvar)
}

struct LayerAcc {
    dims: Vec<[f64; 4]>,
    u: Vec<DVector<f64>>,
    c: Vec<DMatrix<f64>>,
    dkff: f64,
}

impl LayerAcc {
    fn new(layer: &Layer) -> Self {
        let p = layer.num_inducing();
        Self {
            dims: vec![[0.0; 4]; layer.in_dim],
            u: vec![DVector::zeros(p); layer.out_dim],
            c: vec![DMatrix::zeros(p, p); layer.out_dim],
            dkff: 0.0,
        }
    }
}

/// Accumulates parameter adjoints of one layer pass and returns the input
/// adjoint when requested.
fn backward(
    layer: &Layer,
    cache: &LayerCache,
    pass: &LayerPass,
    dmu: &DMatrix<f64>,
    dvar: &DMatrix<f64>,
    acc: &mut LayerAcc,
    input_grad: bool,
) -> Option<DMatrix<f64>> {
    let b = pass.kfv.nrows();
    let f = layer.block_size();
    let mut gk = DMatrix::zeros(b, layer.num_inducing());
    for (r, oc) in cache.outs.iter().enumerate() {
        let dm = dmu.column(r);
        let dv = dvar.column(r);
        gk.ger(1.0, &dm, &oc.jm, 1.0);
        let mut scaled = pass.ks[r].clone();
        for i in 0..b {
            let mut row = scaled.row_mut(i);
            row *= 2.0 * dv[i];
        }
        gk += scaled;
        acc.u[r].gemv_tr(1.0, &pass.kfv, &dm, 1.0);
        let mut weighted = pass.kfv.clone();
        for i in 0..b {
            let mut row = weighted.row_mut(i);
            row *= dv[i];
        }
        acc.c[r].gemm_tr(1.0, &pass.kfv, &weighted, 1.0);
        acc.dkff += dv.sum();
    }
    for d in 0..layer.in_dim {
        let g = gk.columns(d * f, f);
        let blk = &pass.blocks[d];
        let a = &mut acc.dims[d];
        a[0] += g.dot(&blk.d_ell);
        a[1] += g.dot(&blk.d_var);
        a[2] += g.dot(&blk.d_alpha);
        a[3] += g.dot(&blk.d_beta);
    }
    if !input_grad {
        return None;
    }
    let mut dh = DMatrix::zeros(b, layer.in_dim);
    for d in 0..layer.in_dim {
        let g = gk.columns(d * f, f);
        let dt = &pass.blocks[d].d_t;
        for i in 0..b {
            dh[(i, d)] = g.row(i).dot(&dt.row(i));
        }
    }
    if let MeanMode::FixedLinear(w) = &layer.mean {
        dh += dmu * w.transpose();
    }
    Some(dh)
}

/// Writes one layer's gradient (likelihood part from `acc` plus the
/// `−KL/N` part) into `grad` starting at `offset`; returns the summed KL.
fn finalize(layer: &Layer, cache: &LayerCache, acc: &LayerAcc, inv_n: f64, grad: &mut [f64], offset: usize) -> f64 {
    let p = layer.num_inducing();
    let f = layer.block_size();
    let j = &cache.j;
    let mut gk_total = DMatrix::<f64>::zeros(p, p);
    let mut kl_total = 0.0;
    let mut pos = offset + 4 * layer.in_dim;
    for (r, oc) in cache.outs.iter().enumerate() {
        let m = &layer.q_mean[r];
        let lq = &layer.q_chol[r];
        let c = &acc.c[r];
        let u = &acc.u[r];

        let c_js = c * &oc.js;
        let mut g_j = u * m.transpose() + &c_js + c_js.transpose() - c;
        g_j = (&g_j + g_j.transpose()) * 0.5;
        let g_s = j * c * j;
        let mut g_m = j * u;
        let mut g_l = lower_triangle(&(&g_s * lq * 2.0));

        let logdet_s: f64 = lq.diagonal().iter().map(|d| 2.0 * d.abs().ln()).sum();
        let kl = 0.5 * (oc.js.trace() + m.dot(&oc.jm) - p as f64 + cache.logdet_kvv - logdet_s);
        kl_total += kl;
        g_m -= &oc.jm * inv_n;
        let mut kl_l = lower_triangle(&(j * lq));
        for i in 0..p {
            kl_l[(i, i)] -= 1.0 / lq[(i, i)];
        }
        g_l -= kl_l * inv_n;

        if layer.kind != FeatureKind::Rff {
            gk_total -= j * g_j * j;
            let jsj = &oc.js * j;
            gk_total -= (j - jsj - &oc.jm * oc.jm.transpose()) * (0.5 * inv_n);
        }

        grad[pos..pos + p].copy_from_slice(g_m.as_slice());
        pos += p;
        for col in 0..p {
            for row in col..p {
                grad[pos] = g_l[(row, col)];
                pos += 1;
            }
        }
    }
    for d in 0..layer.in_dim {
        let mut g = acc.dims[d];
        if let Some(kb) = &cache.kvv[d] {
            let blk = gk_total.view((d * f, d * f), (f, f));
            g[0] += blk.dot(&kb.d_ell);
            g[1] += blk.dot(&kb.d_var);
        }
        for k in 0..4 {
            g[k] += acc.dkff * cache.kff_partials[d][k];
        }
        grad[offset + 4 * d..offset + 4 * d + 4].copy_from_slice(&g);
    }
    kl_total
}

/// ELBO value with its decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboOutput {
    pub value: f64,
    /// Gradient along [`DeepModel::params`]; empty when not requested.
    pub gradient: Vec<f64>,
    /// `(1/S) Σ_s (1/B) Σ_i E log p(y_i | g_i)`.
    pub expected_loglik: f64,
    /// `Σ_layers Σ_outputs KL(q ‖ p)`.
    pub kl: f64,
}

fn check_batch(model: &DeepModel, x: &DMatrix<f64>, y: &[f64], n_total: usize, noise: &SampleNoise) -> Result<()> {
    model.validate()?;
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(Error::Dimension(format!("batch has {} inputs and {} targets", x.nrows(), y.len())));
    }
    if x.ncols() != model.input_dim() {
        return Err(Error::Dimension(format!("inputs have {} columns, model expects {}", x.ncols(), model.input_dim())));
    }
    if n_total < x.nrows() {
        return Err(Error::domain(format!("data size {n_total} is smaller than the batch {}", x.nrows())));
    }
    if noise.samples() == 0 {
        return Err(Error::domain("at least one sample path is required"));
    }
    let hidden = model.layers.len() - 1;
    for draws in &noise.draws {
        if draws.len() != hidden || draws.iter().zip(&model.layers).any(|(e, l)| e.shape() != (x.nrows(), l.out_dim)) {
            return Err(Error::Dimension("sample noise does not match the batch and layer widths".into()));
        }
    }
    Ok(())
}

/// ELBO of a batch with fixed sample noise (common random numbers), and
/// optionally its gradient with respect to every unconstrained parameter.
pub fn elbo_with_noise(
    model: &DeepModel,
    x: &DMatrix<f64>,
    y: &[f64],
    n_total: usize,
    noise: &SampleNoise,
    with_grad: bool,
) -> Result<ElboOutput> {
    check_batch(model, x, y, n_total, noise)?;
    let n_layers = model.layers.len();
    let caches = model.layers.iter().enumerate().map(|(l, layer)| prepare(layer, l)).collect::<Result<Vec<_>>>()?;
    let b = x.nrows();
    // a single layer has no hidden sampling, so all paths coincide
    let samples = if n_layers == 1 { 1 } else { noise.samples() };
    let scale = 1.0 / (samples as f64 * b as f64);
    let e2 = model.log_noise_variance.exp();
    let mut accs: Vec<LayerAcc> = model.layers.iter().map(LayerAcc::new).collect();
    let mut d_log_noise = 0.0;
    let mut loglik = 0.0;

    let pass0 = forward(&model.layers[0], &caches[0], x, with_grad, 0)?;
    let mut dmu0 = DMatrix::zeros(b, model.layers[0].out_dim);
    let mut dvar0 = DMatrix::zeros(b, model.layers[0].out_dim);

    for s in 0..samples {
        let mut passes: Vec<LayerPass> = Vec::with_capacity(n_layers - 1);
        let mut h = if n_layers > 1 { Some(sample(&pass0, &noise.draws[s][0])) } else { None };
        for l in 1..n_layers {
            let pass = forward(&model.layers[l], &caches[l], h.as_ref().unwrap(), with_grad, l)?;
            h = if l + 1 < n_layers { Some(sample(&pass, &noise.draws[s][l])) } else { None };
            passes.push(pass);
        }
        let last = passes.last().unwrap_or(&pass0);
        let mut dmu = DMatrix::zeros(b, 1);
        let mut dvar = DMatrix::zeros(b, 1);
        for i in 0..b {
            let (mu, v) = (last.mu[(i, 0)], last.var[(i, 0)]);
            let sq = (y[i] - mu).powi(2) + v;
            loglik += scale * (-0.5 * (LN_2PI + model.log_noise_variance) - sq / (2.0 * e2));
            dmu[(i, 0)] = scale * (y[i] - mu) / e2;
            dvar[(i, 0)] = -scale / (2.0 * e2);
            d_log_noise += scale * (-0.5 + sq / (2.0 * e2));
        }
        if !with_grad {
            continue;
        }
        if n_layers == 1 {
            dmu0 += dmu;
            dvar0 += dvar;
            continue;
        }
        for l in (1..n_layers).rev() {
            let dh = backward(&model.layers[l], &caches[l], &passes[l - 1], &dmu, &dvar, &mut accs[l], true)
                .expect("input gradient requested");
            let prev = if l == 1 { &pass0 } else { &passes[l - 2] };
            let (pm, pv) = sample_adjoint(prev, &noise.draws[s][l - 1], &dh);
            dmu = pm;
            dvar = pv;
        }
        dmu0 += dmu;
        dvar0 += dvar;
    }

    let inv_n = 1.0 / n_total as f64;
    let mut gradient = Vec::new();
    let mut kl = 0.0;
    if with_grad {
        backward(&model.layers[0], &caches[0], &pass0, &dmu0, &dvar0, &mut accs[0], false);
        gradient = vec![0.0; model.num_params()];
        let mut offset = 0;
        for (l, layer) in model.layers.iter().enumerate() {
            kl += finalize(layer, &caches[l], &accs[l], inv_n, &mut gradient, offset);
            let p = layer.num_inducing();
            offset += 4 * layer.in_dim + layer.out_dim * (p + p * (p + 1) / 2);
        }
        *gradient.last_mut().unwrap() = d_log_noise;
    } else {
        for (layer, cache) in model.layers.iter().zip(&caches) {
            let p = layer.num_inducing() as f64;
            for (r, oc) in cache.outs.iter().enumerate() {
                let lq = &layer.q_chol[r];
                let logdet_s: f64 = lq.diagonal().iter().map(|d| 2.0 * d.abs().ln()).sum();
                kl += 0.5 * (oc.js.trace() + layer.q_mean[r].dot(&oc.jm) - p + cache.logdet_kvv - logdet_s);
            }
        }
    }
    let value = loglik - inv_n * kl;
    if !value.is_finite() {
        return Err(Error::numerical("non-finite ELBO"));
    }
    Ok(ElboOutput { value, gradient, expected_loglik: loglik, kl })
}

/// ELBO with freshly drawn sample noise (`model.train_samples` paths).
pub fn elbo<R: Rng + ?Sized>(
    model: &DeepModel,
    x: &DMatrix<f64>,
    y: &[f64],
    n_total: usize,
    rng: &mut R,
) -> Result<ElboOutput> {
    let noise = SampleNoise::draw(model, x.nrows(), model.train_samples, rng);
    elbo_with_noise(model, x, y, n_total, &noise, true)
}

/// Sampled outputs of one layer together with the per-point moments.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput {
    pub samples: DMatrix<f64>,
    /// Posterior mean plus the layer's mean function.
    pub mean: DMatrix<f64>,
    pub variance: DMatrix<f64>,
}

/// Marginal reparameterized sampling of one layer: `μ + √v ⊙ ε`.
pub fn layer_forward(layer: &Layer, inputs: &DMatrix<f64>, noise_draws: &DMatrix<f64>) -> Result<LayerOutput> {
    layer.validate()?;
    if inputs.ncols() != layer.in_dim {
        return Err(Error::Dimension(format!("inputs have {} columns, layer expects {}", inputs.ncols(), layer.in_dim)));
    }
    if noise_draws.shape() != (inputs.nrows(), layer.out_dim) {
        return Err(Error::Dimension("noise draws must be batch × out_dim".into()));
    }
    let cache = prepare(layer, 0)?;
    let pass = forward(layer, &cache, inputs, false, 0)?;
    let samples = sample(&pass, noise_draws);
    let variance = pass.var.map(|v| v.max(0.0));
    Ok(LayerOutput { samples, mean: pass.mu, variance })
}

/// Per-sample outer-layer moments (`S × B` each), without observation noise.
pub(crate) fn propagate(model: &DeepModel, x: &DMatrix<f64>, noise: &SampleNoise) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    model.validate()?;
    if x.ncols() != model.input_dim() {
        return Err(Error::Dimension(format!("inputs have {} columns, model expects {}", x.ncols(), model.input_dim())));
    }
    let caches = model.layers.iter().enumerate().map(|(l, layer)| prepare(layer, l)).collect::<Result<Vec<_>>>()?;
    let n_layers = model.layers.len();
    let pass0 = forward(&model.layers[0], &caches[0], x, false, 0)?;
    let mut means = Vec::with_capacity(noise.samples());
    let mut vars = Vec::with_capacity(noise.samples());
    for s in 0..noise.samples() {
        if n_layers == 1 {
            means.push(pass0.mu.column(0).iter().copied().collect());
            vars.push(pass0.var.column(0).iter().map(|v| v.max(0.0)).collect());
            continue;
        }
        let mut h = sample(&pass0, &noise.draws[s][0]);
        let mut out = None;
        for l in 1..n_layers {
            let pass = forward(&model.layers[l], &caches[l], &h, false, l)?;
            if l + 1 < n_layers {
                h = sample(&pass, &noise.draws[s][l]);
            } else {
                out = Some(pass);
            }
        }
        let pass = out.unwrap();
        means.push(pass.mu.column(0).iter().copied().collect());
        vars.push(pass.var.column(0).iter().map(|v| v.max(0.0)).collect());
    }
    Ok((means, vars))
}
