//! `dlfm`: fit, predict, verify and feature-curve dumping.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dlfm_core::data::{load_csv, metrics, prediction_csv, read_csv, split, Dataset, Transforms};
use dlfm_core::deep::{self, predict_mixture, DeepModel};
use dlfm_core::train::fit;
use dlfm_core::verify::{feature_curves, run_suite, Suite};
use dlfm_core::{Error, FeatureKind, FeatureSet, KernelSpec, OdeSpec, RunConfig, VfrfContext};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "dlfm", version, about = "Deep latent force models with Fourier response features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write it to a text file.
    Fit {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training CSV (last column is the target); overrides `data.train`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out CSV for per-epoch rmse/nmll; overrides `data.test`.
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write predictions for a CSV of inputs (with or without targets).
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check closed forms and gradients against their oracles.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Dump `t,vff,vfrf` curves of one basis function.
    Features {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        basis: usize,
        /// `t_min,t_max`; defaults to the feature interval.
        #[arg(long, allow_hyphen_values = true)]
        range: Option<String>,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Output CSV; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, stage: &str, err: impl std::fmt::Display) -> Failure {
    Failure { code, message: format!("{stage}: {err}") }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| fail(2, "write", format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| fail(2, "config", e)),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_fit(config: Option<&Path>, data: Option<PathBuf>, test_data: Option<PathBuf>, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if data.is_some() {
        cfg.data.train = data;
    }
    if test_data.is_some() {
        cfg.data.test = test_data;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let train_path = cfg.data.train.clone().ok_or_else(|| fail(2, "config", "no training data (use --data or data.train)"))?;
    let raw = load_csv(&train_path).map_err(|e| fail(2, "data", e))?;
    let (raw_train, raw_test) = match &cfg.data.test {
        Some(p) => (raw, Some(load_csv(p).map_err(|e| fail(2, "data", e))?)),
        None if cfg.data.test_fraction > 0.0 => {
            let (tr, te) = split(&raw, cfg.data.test_fraction, cfg.data.seed).map_err(|e| fail(2, "data", e))?;
            (tr, Some(te))
        }
        None => (raw, None),
    };
    if let Some(te) = &raw_test {
        if te.dim() != raw_train.dim() {
            return Err(fail(2, "data", format!("test data has {} inputs, training data {}", te.dim(), raw_train.dim())));
        }
    }
    let transforms = Transforms::fit(&raw_train).map_err(|e| fail(2, "data", e))?;
    let train = transforms.apply(&raw_train).map_err(|e| fail(2, "data", e))?;
    let tcfg = cfg.train_config();
    let arch = cfg.architecture(train.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut model = DeepModel::new(&arch, &tcfg.init, &train.inputs, &mut rng).map_err(|e| match e {
        Error::Numerical(_) => fail(3, "initialization", e),
        _ => fail(2, "initialization", e),
    })?;
    model.train_samples = cfg.model.train_samples;
    model.eval_samples = cfg.model.eval_samples;

    let test_inputs = match &raw_test {
        Some(te) => Some((transforms.apply_inputs(&te.inputs).map_err(|e| fail(2, "data", e))?, te.targets.clone())),
        None => None,
    };
    let eval_seed = tcfg.seed;
    let mut evaluator = |m: &DeepModel| -> dlfm_core::Result<(f64, f64)> {
        let (x, y) = test_inputs.as_ref().expect("evaluator only built with test data");
        let pred = predict_mixture(m, x, &mut ChaCha8Rng::seed_from_u64(eval_seed))?;
        metrics(&transforms.invert_predictive(&pred), y)
    };
    let validation: Option<&mut dlfm_core::train::Evaluator<'_>> = if test_inputs.is_some() { Some(&mut evaluator) } else { None };
    fit(&mut model, &train, &tcfg, validation, &mut |r| println!("{r}")).map_err(|e| match e {
        Error::Numerical(_) => fail(3, "training", e),
        _ => fail(2, "training", e),
    })?;

    let mut meta = cfg.echo();
    meta.extend(transforms.to_meta());
    deep::save(out, &model, &meta).map_err(|e| fail(2, "write", e))
}

fn cmd_predict(model_path: &Path, data_path: &Path, out: &Path, seed: u64) -> Result<(), Failure> {
    let (model, meta) = deep::load(model_path).map_err(|e| fail(2, "model", e))?;
    let transforms = Transforms::from_meta(&meta).map_err(|e| fail(2, "model", e))?;
    let table = read_csv(data_path).map_err(|e| fail(2, "data", e))?;
    let d = model.input_dim();
    let (inputs, targets, names) = if table.rows.ncols() == d + 1 {
        let ds = Dataset::from_table(&table).map_err(|e| fail(2, "data", e))?;
        (ds.inputs, Some(ds.targets), table.header[..d].to_vec())
    } else if table.rows.ncols() == d {
        (table.rows.clone(), None, table.header.clone())
    } else {
        return Err(fail(4, "data", format!("{} columns, model expects {d} inputs (plus an optional target)", table.rows.ncols())));
    };
    let x = transforms.apply_inputs(&inputs).map_err(|e| fail(4, "data", e))?;
    let pred = predict_mixture(&model, &x, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| match e {
        Error::Dimension(_) => fail(4, "predict", e),
        _ => fail(3, "predict", e),
    })?;
    let pred = transforms.invert_predictive(&pred);
    let csv = prediction_csv(&names, &inputs, &pred, targets.as_deref()).map_err(|e| fail(4, "predict", e))?;
    write_file(out, &csv)?;
    if let Some(y) = &targets {
        let (rmse, nmll) = metrics(&pred, y).map_err(|e| fail(4, "predict", e))?;
        println!("rmse={rmse} nmll={nmll}");
    }
    Ok(())
}

fn cmd_verify(suite: &str) -> Result<(), Failure> {
    let suite: Suite = suite.parse().map_err(|e| fail(2, "verify", e))?;
    let reports = run_suite(suite).map_err(|e| fail(1, "verify", e))?;
    for r in &reports {
        println!("{r}");
    }
    if reports.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(fail(1, "verify", "one or more formulas exceeded tolerance"))
    }
}

fn cmd_features(config: Option<&Path>, basis: usize, range: Option<&str>, n: usize, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let init = cfg.train_config().init;
    let m = &cfg.model;
    let kernel = KernelSpec::new(m.order, init.kernel_variance, init.lengthscale).map_err(|e| fail(2, "config", e))?;
    let ode = OdeSpec::new(init.alpha, init.beta).map_err(|e| fail(2, "config", e))?;
    let fs = FeatureSet::new(m.interval_a, m.interval_b, m.frequencies).map_err(|e| fail(2, "config", e))?;
    if m.feature_kind == FeatureKind::Rff {
        return Err(fail(2, "config", "feature curves are defined for vfrf and vff kinds"));
    }
    let (lo, hi) = match range {
        None => (m.interval_a, m.interval_b),
        Some(r) => {
            let parts: Vec<&str> = r.split(',').collect();
            let parsed: Option<Vec<f64>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
            match parsed.as_deref() {
                Some([a, b]) => (*a, *b),
                _ => return Err(fail(2, "range", format!("expected 't_min,t_max', got '{r}'"))),
            }
        }
    };
    let ctx = VfrfContext::new(kernel, ode, fs);
    let curves: DMatrix<f64> = feature_curves(&ctx, basis, lo, hi, n).map_err(|e| fail(2, "features", e))?;
    let mut text = String::from("t,vff,vfrf\n");
    for row in curves.row_iter() {
        text.push_str(&format!("{},{},{}\n", row[0], row[1], row[2]));
    }
    match out {
        Some(p) => write_file(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit { config, data, test_data, out, seed } => cmd_fit(config.as_deref(), data, test_data, &out, seed),
        Command::Predict { model, data, out, seed } => cmd_predict(&model, &data, &out, seed),
        Command::Verify { suite } => cmd_verify(&suite),
        Command::Features { config, basis, range, n, out } => cmd_features(config.as_deref(), basis, range.as_deref(), n, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
