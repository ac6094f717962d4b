//! Acceptance suite. Each test prints one `criterion <n>: PASS|FAIL ...` line
//! and then asserts the criterion at its stated tolerance.

use std::io::Write;
use std::time::Instant;

use dlfm_core::data::{metrics, multistep_synthetic, split, Dataset, Transforms};
use dlfm_core::deep::{additive_layer_covariances, additive_prior_gram, predict_mixture, DimParams};
use dlfm_core::features::{rff_kernel_approx, vfrf_eval, vff_eval};
use dlfm_core::gp::{
    exact_log_marginal, exact_posterior, fit_exact_lfm, optimal_q, single_layer_elbo, sparse_marginals, LfmHyper,
};
use dlfm_core::kernels::{lfm_gram, lfm_kernel_eval, spectral_sample};
use dlfm_core::oracle::{convolve_green_split, double_convolve_kernel, psd_check, QuadratureConfig};
use dlfm_core::train::{fit, grad_check};
use dlfm_core::{
    Architecture, DeepModel, FeatureKind, FeatureSet, InitConfig, KernelSpec, MaternOrder, NoiseModel, OdeSpec,
    TrainConfig, VfrfContext,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Writes to the stderr handle directly so the line shows up even when the
/// harness captures test output.
fn report(n: u32, pass: bool, detail: String) {
    let _ = writeln!(std::io::stderr(), "criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Parameter grid shared by the kernel and feature oracle criteria.
fn oracle_grid() -> Vec<(MaternOrder, f64, f64, f64)> {
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

fn tight_oracle() -> QuadratureConfig {
    QuadratureConfig { tolerance: 1e-15, relative_tolerance: 1e-12, ..Default::default() }
}

#[test]
fn criterion_01_lfm_kernels_match_double_convolution() {
    let start = Instant::now();
    let cfg = tight_oracle();
    let lags: Vec<f64> = (0..=300).map(|i| i as f64 * 0.01).collect();
    let cases: Vec<_> = oracle_grid()
        .into_iter()
        .flat_map(|p| lags.iter().map(move |&r| (p, r)))
        .collect();
    let worst = cases
        .iter()
        .map(|&((order, lam, gam, beta), r)| {
            let k = KernelSpec::with_lambda(order, 1.0, lam).unwrap();
            let ode = OdeSpec::new(gam * beta, beta).unwrap();
            let closed = lfm_kernel_eval(&k, &ode, r).unwrap();
            let oracle = double_convolve_kernel(&k, &ode, r, 0.0, &cfg).unwrap();
            let err = (closed - oracle).abs() / oracle.max(1e-12);
            (err, format!("{order:?} λ={lam} γ={gam} β={beta} r={r:.2}"))
        })
        .fold((0.0, String::new()), |a, b| if b.0 > a.0 { b } else { a });
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.0 < 1e-5 && secs < 120.0;
    report(
        1,
        pass,
        format!("max_rel_err={:.3e} at [{}] points={} runtime={secs:.1}s", worst.0, worst.1, cases.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_02_vfrf_match_single_convolution() {
    let start = Instant::now();
    let cfg = tight_oracle();
    let (a, b) = (-1.0, 4.0);
    let fs = FeatureSet::new(a, b, 3).unwrap();
    // constant, cosines z₁ and z₃, sines z₁ and z₃
    let indices = [0usize, 1, 3, 4, 6];
    let ts = linspace(a - 1.0, b + 1.0, 40);
    let mut cases = Vec::new();
    for p in oracle_grid() {
        for &m in &indices {
            for &t in &ts {
                cases.push((p, m, t));
            }
        }
    }
    let worst = cases
        .iter()
        .map(|&((order, lam, gam, beta), m, t)| {
            let k = KernelSpec::with_lambda(order, 1.0, lam).unwrap();
            let ode = OdeSpec::new(gam * beta, beta).unwrap();
            let ctx = VfrfContext::new(k, ode, fs.clone());
            let closed = vfrf_eval(&ctx, m, t).unwrap();
            let phi = |tau: f64| vff_eval(&k, &fs, m, tau).unwrap();
            let oracle = convolve_green_split(phi, &ode, t, &[a, b], &cfg).unwrap();
            let err = (closed - oracle).abs() / oracle.abs().max(1.0);
            (err, format!("{order:?} basis={m} λ={lam} γ={gam} β={beta} t={t:.3}"))
        })
        .fold((0.0, String::new()), |x, y| if y.0 > x.0 { y } else { x });
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.0 < 1e-5 && secs < 120.0;
    report(
        2,
        pass,
        format!("max_err={:.3e} at [{}] points={} runtime={secs:.1}s", worst.0, worst.1, cases.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_03_vfrf_continuity_across_branches() {
    let (a, b) = (-1.0, 4.0);
    let fs = FeatureSet::new(a, b, 3).unwrap();
    let mut worst_region: (f64, String) = (0.0, String::new());
    let mut worst_conf: (f64, String) = (0.0, String::new());
    let mut raw_change = 0.0f64;
    for (order, lam, gam, beta) in oracle_grid() {
        let k = KernelSpec::with_lambda(order, 1.0, lam).unwrap();
        let ctx = VfrfContext::new(k, OdeSpec::new(gam * beta, beta).unwrap(), fs.clone());
        for m in 0..fs.size() {
            for edge in [a, b] {
                let lo = vfrf_eval(&ctx, m, edge - 1e-7).unwrap();
                let hi = vfrf_eval(&ctx, m, edge + 1e-7).unwrap();
                let d = (hi - lo).abs() / lo.abs().max(1.0);
                if d > worst_region.0 {
                    worst_region = (d, format!("{order:?} basis={m} λ={lam} γ={gam} β={beta} edge={edge}"));
                }
            }
        }
        if gam != lam {
            continue;
        }
        for m in 0..fs.size() {
            for t in linspace(a - 1.0, b + 1.0, 40) {
                let at = vfrf_eval(&ctx, m, t).unwrap();
                let side = |sign: f64| {
                    let ode = OdeSpec::new(lam * (1.0 + sign * 1e-5) * beta, beta).unwrap();
                    vfrf_eval(&VfrfContext::new(k, ode, fs.clone()), m, t).unwrap()
                };
                let (below, above) = (side(-1.0), side(1.0));
                let scale = at.abs().max(1.0);
                // centered second difference: zero up to O(δ²) for a continuous
                // function, O(jump) if the γ = λ value disagrees with its neighbours
                let jump = (0.5 * (below + above) - at).abs() / scale;
                let raw = (below - at).abs().max((above - at).abs()) / scale;
                raw_change = raw_change.max(raw);
                if jump > worst_conf.0 {
                    worst_conf = (jump, format!("{order:?} basis={m} λ={lam} β={beta} t={t:.3}"));
                }
            }
        }
    }
    let pass = worst_region.0 < 1e-5 && worst_conf.0 < 1e-5;
    report(
        3,
        pass,
        format!(
            "region_jump={:.3e} [{}] confluence_jump={:.3e} [{}] (first-order change over ±1e-5: {:.3e})",
            worst_region.0, worst_region.1, worst_conf.0, worst_conf.1, raw_change
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_reversion_to_plain_fourier_features() {
    let start = Instant::now();
    let (a, b) = (-1.0, 4.0);
    let fs = FeatureSet::new(a, b, 20).unwrap();
    let ode = OdeSpec::new(1.0, 1e-6).unwrap();
    let mut worst_feature: (f64, String) = (0.0, String::new());
    for order in MaternOrder::ALL {
        let k = KernelSpec::new(order, 1.0, 1.0).unwrap();
        let ctx = VfrfContext::new(k, ode, fs.clone());
        for m in 0..fs.size() {
            for t in linspace(a, b, 2001) {
                let d = (vfrf_eval(&ctx, m, t).unwrap() - vff_eval(&k, &fs, m, t).unwrap()).abs();
                if d > worst_feature.0 {
                    worst_feature = (d, format!("{order:?} basis={m} t={t:.4}"));
                }
            }
        }
    }

    // single-layer training with α, β frozen: response features versus plain Fourier features
    let raw = multistep_synthetic(100, 5, 0.05, 21).unwrap();
    let data = Transforms::fit(&raw).unwrap().apply(&raw).unwrap();
    let init = InitConfig { alpha: 1.0, beta: 1e-6, ..InitConfig::default() };
    let epochs = 300;
    let cfg = TrainConfig { epochs, beta_freeze_epochs: epochs, seed: 5, ..TrainConfig::default() };
    // full batch: one Adam step per epoch, parameters captured after each
    let (pv, lv) = run_trajectory(FeatureKind::Vfrf, &data, &init, &cfg);
    let (pf, lf) = run_trajectory(FeatureKind::Vff, &data, &init, &cfg);
    let mut worst_step = 0.0f64;
    for (x, y) in pv.iter().zip(&pf) {
        let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = x.iter().zip(y).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        worst_step = worst_step.max(diff / scale);
    }
    let worst_loss = lv.iter().zip(&lf).fold(0.0f64, |m, (p, q)| m.max((p - q).abs() / q.abs()));
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_feature.0 < 1e-3 && worst_step < 1e-6 && worst_loss < 1e-6;
    report(
        4,
        pass,
        format!(
            "max|vfrf-vff|={:.3e} [{}] trajectory: max step rel diff={:.3e} max loss rel diff={:.3e} over {} steps runtime={secs:.1}s",
            worst_feature.0,
            worst_feature.1,
            worst_step,
            worst_loss,
            pv.len()
        ),
    );
    assert!(pass);
}

/// Parameters after every Adam step and the per-step negative ELBO.
fn run_trajectory(kind: FeatureKind, data: &Dataset, init: &InitConfig, cfg: &TrainConfig) -> (Vec<Vec<f64>>, Vec<f64>) {
    let arch = Architecture { input_dim: 1, hidden_dims: vec![], order: MaternOrder::ThreeHalves, frequencies: 20, kind };
    let mut model = DeepModel::new(&arch, init, &data.inputs, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let mut params = Vec::new();
    let mut snapshot = |m: &DeepModel| -> dlfm_core::Result<(f64, f64)> {
        params.push(m.params());
        Ok((0.0, 0.0))
    };
    let losses = fit(&mut model, data, cfg, Some(&mut snapshot), &mut |_| {}).unwrap();
    (params, losses)
}

#[test]
fn criterion_05_sparse_posterior_tracks_exact_lfm() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 150;
    let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 3.0).collect();
    x.sort_by(f64::total_cmp);
    // one draw from a Matérn-1/2 LFM prior plus noise
    let truth = LfmHyper {
        kernel: KernelSpec::new(MaternOrder::Half, 1.0, 0.5).unwrap(),
        ode: OdeSpec::new(1.0, 0.3).unwrap(),
        noise: NoiseModel::new(0.01).unwrap(),
    };
    let kf = truth.kernel_fn();
    let k = DMatrix::from_fn(n, n, |i, j| kf(x[i], x[j]) + if i == j { 1e-10 } else { 0.0 });
    let f = k.cholesky().unwrap().l() * DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let raw: Vec<f64> = (0..n).map(|i| f[i] + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let y: Vec<f64> = raw.iter().map(|v| (v - mean) / sd).collect();

    // hyperparameters from the exact marginal likelihood, then fixed
    let init = InitConfig::default();
    let start_h = LfmHyper {
        kernel: KernelSpec::new(MaternOrder::Half, 0.1, 1.0).unwrap(),
        ode: OdeSpec::new(1.0, 0.01).unwrap(),
        noise: NoiseModel::new(0.01).unwrap(),
    };
    let h = fit_exact_lfm(&start_h, &x, &y, 500, 0.05).unwrap();
    let grid = linspace(0.0, 3.0, 200);
    let exact = exact_posterior(&h.kernel_fn(), &x, &y, &h.noise, &grid).unwrap();
    let exact_var = exact.variance.iter().sum::<f64>() / 200.0;

    let xm = DMatrix::from_column_slice(n, 1, &x);
    let gm = DMatrix::from_column_slice(200, 1, &grid);
    let sparse = |kind: FeatureKind, m: usize, seed: u64| {
        let arch = Architecture { input_dim: 1, hidden_dims: vec![], order: MaternOrder::Half, frequencies: m, kind };
        let mut model = DeepModel::new(&arch, &init, &xm, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        model.layers[0].dims[0] =
            DimParams::new(h.kernel.lengthscale, h.kernel.variance, h.ode.alpha, h.ode.beta).unwrap();
        let tr = additive_layer_covariances(&model.layers[0], &xm).unwrap();
        let q = optimal_q(&tr.kfv, &tr.kvv, &y, &h.noise).unwrap();
        let te = additive_layer_covariances(&model.layers[0], &gm).unwrap();
        let post = sparse_marginals(&te.kfv, &te.kvv, &vec![te.prior_variance; 200], &q).unwrap();
        let rms = (post.mean.iter().zip(&exact.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 200.0).sqrt();
        (rms, post.variance.iter().sum::<f64>() / 200.0)
    };
    let (rms80, _) = sparse(FeatureKind::Vfrf, 80, 0);
    let (rms20, _) = sparse(FeatureKind::Vfrf, 20, 0);
    let rff_vars: Vec<f64> = (0..5).map(|s| sparse(FeatureKind::Rff, 80, s).1).collect();
    let secs = start.elapsed().as_secs_f64();
    let pass = rms80 < 0.05 && rms80 < rms20 && rff_vars.iter().all(|v| *v < exact_var) && secs < 300.0;
    report(
        5,
        pass,
        format!(
            "rms(M=80)={rms80:.4e} rms(M=20)={rms20:.4e} exact mean var={exact_var:.4e} rff mean var over 5 draws={:?} runtime={secs:.1}s",
            rff_vars.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_two_layer_gradient_check() {
    let start = Instant::now();
    let raw = multistep_synthetic(20, 5, 0.05, 6).unwrap();
    let data = Transforms::fit(&raw).unwrap().apply(&raw).unwrap();
    let arch = Architecture {
        input_dim: 1,
        hidden_dims: vec![3],
        order: MaternOrder::ThreeHalves,
        frequencies: 5,
        kind: FeatureKind::Vfrf,
    };
    let mut model = DeepModel::new(&arch, &InitConfig::default(), &data.inputs, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    // move every parameter off its initial value before checking
    let cfg = TrainConfig { epochs: 30, learning_rate: 0.02, seed: 6, ..TrainConfig::default() };
    fit(&mut model, &data, &cfg, None, &mut |_| {}).unwrap();
    let checked = grad_check(&model, &data, 1e-4, 11).unwrap();
    let worst = checked.groups.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let secs = start.elapsed().as_secs_f64();
    let pass = checked.passed && secs < 60.0;
    report(
        6,
        pass,
        format!(
            "params={} max_rel_err={:.3e} worst group={} runtime={secs:.1}s",
            model.num_params(),
            checked.max_rel_err,
            worst.0
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_optimal_bound_below_exact_evidence() {
    let mut worst = f64::INFINITY;
    let mut detail = String::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x: Vec<f64> = (0..30).map(|_| rng.random::<f64>() * 3.0).collect();
        let y: Vec<f64> = (0..30).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let order = MaternOrder::ALL[seed as usize % 3];
        let dims = DimParams::new(
            rng.random_range(0.3..2.0),
            rng.random_range(0.2..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.05..1.0),
        )
        .unwrap();
        let noise = NoiseModel::new(rng.random_range(0.01..0.5)).unwrap();
        let arch = Architecture { input_dim: 1, hidden_dims: vec![], order, frequencies: 10, kind: FeatureKind::Vfrf };
        let xm = DMatrix::from_column_slice(30, 1, &x);
        let mut model = DeepModel::new(&arch, &InitConfig::default(), &xm, &mut rng).unwrap();
        model.layers[0].dims[0] = dims;
        let cov = additive_layer_covariances(&model.layers[0], &xm).unwrap();
        let q = optimal_q(&cov.kfv, &cov.kvv, &y, &noise).unwrap();
        let bound = single_layer_elbo(&cov.kfv, &cov.kvv, &vec![cov.prior_variance; 30], &q, &y, &noise).unwrap();
        let kernel = dims.kernel(order).unwrap();
        let ode = dims.ode().unwrap();
        let lml = exact_log_marginal(&|s, t| lfm_kernel_eval(&kernel, &ode, (s - t).abs()).unwrap(), &x, &y, &noise).unwrap();
        let gap = lml - bound;
        if gap < worst {
            worst = gap;
            detail = format!("seed={seed} order={} lml={lml:.6} elbo={bound:.6}", order.label());
        }
    }
    let pass = worst >= -1e-6;
    report(7, pass, format!("min gap (lml - elbo)={worst:.3e} [{detail}] over 10 seeds"));
    assert!(pass);
}

#[test]
fn criterion_08_deep_response_features_win_on_steps() {
    let start = Instant::now();
    let seeds = 0..5u64;
    let mut rmse = [0.0f64; 3];
    let labels = ["2-layer vfrf", "1-layer vfrf", "2-layer vfrf beta frozen at 1e-6"];
    let mut per_seed = Vec::new();
    for seed in seeds.clone() {
        let raw = multistep_synthetic(300, 5, 0.05, seed).unwrap();
        let (raw_train, raw_test) = split(&raw, 0.2, seed).unwrap();
        let transforms = Transforms::fit(&raw_train).unwrap();
        let train = transforms.apply(&raw_train).unwrap();
        let test_x = transforms.apply_inputs(&raw_test.inputs).unwrap();
        let mut row = [0.0; 3];
        for (v, slot) in row.iter_mut().enumerate() {
            let hidden = if v == 1 { vec![] } else { vec![1] };
            let arch = Architecture { input_dim: 1, hidden_dims: hidden, order: MaternOrder::ThreeHalves, frequencies: 20, kind: FeatureKind::Vfrf };
            let (init, freeze) = if v == 2 {
                (InitConfig { alpha: 1.0, beta: 1e-6, ..InitConfig::default() }, 3000)
            } else {
                (InitConfig::default(), 0)
            };
            let cfg = TrainConfig { epochs: 3000, seed, beta_freeze_epochs: freeze, init, ..TrainConfig::default() };
            let mut model = DeepModel::new(&arch, &init, &train.inputs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            fit(&mut model, &train, &cfg, None, &mut |_| {}).unwrap();
            let pred = predict_mixture(&model, &test_x, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            *slot = metrics(&transforms.invert_predictive(&pred), &raw_test.targets).unwrap().0;
        }
        for k in 0..3 {
            rmse[k] += row[k] / 5.0;
        }
        per_seed.push(row);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = rmse[0] < rmse[1] && rmse[0] < rmse[2] && secs < 1200.0;
    let summary: Vec<String> = labels.iter().zip(rmse).map(|(l, r)| format!("{l}={r:.5}")).collect();
    report(8, pass, format!("mean held-out rmse: {} per seed={per_seed:.4?} runtime={secs:.1}s", summary.join(" ")));
    assert!(pass);
}

#[test]
fn criterion_09_random_features_converge() {
    let start = Instant::now();
    let ts = linspace(0.0, 3.0, 30);
    let ode = OdeSpec::new(1.0, 0.5).unwrap();
    let counts = [100usize, 1_000, 10_000, 100_000];
    let reps = 5;
    let mut pass = true;
    let mut lines = Vec::new();
    for order in MaternOrder::ALL {
        let k = KernelSpec::new(order, 1.0, 1.0).unwrap();
        let exact = lfm_gram(&k, &ode, &ts, &ts).unwrap();
        let mut stats = Vec::new();
        for &s in &counts {
            let errs: Vec<f64> = (0..reps)
                .map(|r| {
                    let omegas = spectral_sample(&k, s, &mut ChaCha8Rng::seed_from_u64(1000 * r as u64 + s as u64));
                    let approx = DMatrix::from_fn(30, 30, |i, j| rff_kernel_approx(&k, &ode, &omegas, ts[i], ts[j]));
                    (&approx - &exact).norm() / exact.norm()
                })
                .collect();
            let mean = errs.iter().sum::<f64>() / reps as f64;
            let sd = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
            stats.push((mean, sd));
        }
        for w in stats.windows(2) {
            // decrease required up to twice the larger replicate spread
            if w[1].0 > w[0].0 + 2.0 * w[0].1.max(w[1].1) {
                pass = false;
            }
        }
        if order == MaternOrder::FiveHalves && stats[3].0 >= 0.03 {
            pass = false;
        }
        lines.push(format!(
            "{}: {}",
            order.label(),
            stats.iter().map(|(m, s)| format!("{m:.3e}±{s:.1e}")).collect::<Vec<_>>().join(" ")
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    report(9, pass, format!("frobenius rel err at S=1e2..1e5 [{}] runtime={secs:.1}s", lines.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_10_joint_prior_is_psd() {
    let mut worst = f64::INFINITY;
    let mut all = true;
    let mut count = 0;
    for in_dim in [1usize, 2] {
        for m in [3usize, 10] {
            for order in MaternOrder::ALL {
                for (alpha, beta) in [(1.0, 0.01), (1.0, 0.5), (2.0, 1.0)] {
                    let mut rng = ChaCha8Rng::seed_from_u64(count);
                    let t = DMatrix::from_fn(10, in_dim, |_, _| rng.random::<f64>() * 3.0);
                    let arch = Architecture { input_dim: in_dim, hidden_dims: vec![], order, frequencies: m, kind: FeatureKind::Vfrf };
                    let mut model = DeepModel::new(&arch, &InitConfig::default(), &t, &mut rng).unwrap();
                    for (d, dim) in model.layers[0].dims.iter_mut().enumerate() {
                        *dim = DimParams::new(0.7 + 0.4 * d as f64, 1.0, alpha, beta).unwrap();
                    }
                    let layer = &model.layers[0];
                    let cov = additive_layer_covariances(layer, &t).unwrap();
                    let kff = additive_prior_gram(layer, &t).unwrap();
                    let p = cov.kvv.nrows();
                    let mut joint = DMatrix::zeros(10 + p, 10 + p);
                    joint.view_mut((0, 0), (10, 10)).copy_from(&kff);
                    joint.view_mut((0, 10), (10, p)).copy_from(&cov.kfv);
                    joint.view_mut((10, 0), (p, 10)).copy_from(&cov.kfv.transpose());
                    joint.view_mut((10, 10), (p, p)).copy_from(&cov.kvv);
                    let r = psd_check(&joint, 1e-6).unwrap();
                    all &= r.passed;
                    worst = worst.min(r.min_eigenvalue / r.threshold.abs().max(f64::MIN_POSITIVE));
                    count += 1;
                }
            }
        }
    }
    report(10, all, format!("{count} joint matrices checked, min eigenvalue/threshold ratio={worst:.3e}"));
    assert!(all);
}
