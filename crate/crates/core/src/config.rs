//! Run configuration: flat `section.key = value` lines with `#` comments.

use std::path::{Path, PathBuf};

use crate::deep::{Architecture, FeatureKind};
use crate::error::{Error, Result};
use crate::kernels::MaternOrder;
use crate::train::{InitConfig, TrainConfig};

/// `β` used for the `vff` feature kind, which is realized as response
/// features with `α = 1` and `β` pinned near zero.
pub const VFF_PINNED_BETA: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub order: MaternOrder,
    pub layers: usize,
    /// Hidden widths; empty means "input width for every hidden layer".
    pub hidden_dims: Vec<usize>,
    pub frequencies: usize,
    pub interval_a: f64,
    pub interval_b: f64,
    pub feature_kind: FeatureKind,
    pub train_samples: usize,
    pub eval_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub test_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let init = InitConfig::default();
        Self {
            model: ModelSection {
                order: MaternOrder::ThreeHalves,
                layers: 2,
                hidden_dims: Vec::new(),
                frequencies: 20,
                interval_a: init.interval_a,
                interval_b: init.interval_b,
                feature_kind: FeatureKind::Vfrf,
                train_samples: 5,
                eval_samples: 100,
            },
            train: TrainConfig::default(),
            data: DataSection { train: None, test: None, test_fraction: 0.0, seed: 0 },
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'section.key = value'", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key {
            "model.order" => m.order = v.parse().map_err(|_| Error::Config(format!("{key}: unknown order '{v}'")))?,
            "model.layers" => m.layers = parse_value(key, v)?,
            "model.hidden_dims" => {
                m.hidden_dims = v
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_value(key, s))
                    .collect::<Result<_>>()?
            }
            "model.M" => m.frequencies = parse_value(key, v)?,
            "model.interval_a" => m.interval_a = parse_value(key, v)?,
            "model.interval_b" => m.interval_b = parse_value(key, v)?,
            "model.feature_kind" => m.feature_kind = v.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))?,
            "model.train_samples" => m.train_samples = parse_value(key, v)?,
            "model.eval_samples" => m.eval_samples = parse_value(key, v)?,
            "train.learning_rate" => t.learning_rate = parse_value(key, v)?,
            "train.epochs" => t.epochs = parse_value(key, v)?,
            "train.batch_size" => t.batch_size = parse_value(key, v)?,
            "train.seed" => t.seed = parse_value(key, v)?,
            "train.beta_freeze_epochs" => t.beta_freeze_epochs = parse_value(key, v)?,
            "init.lengthscale" => t.init.lengthscale = parse_value(key, v)?,
            "init.alpha" => t.init.alpha = parse_value(key, v)?,
            "init.beta" => t.init.beta = parse_value(key, v)?,
            "init.kernel_variance" => t.init.kernel_variance = parse_value(key, v)?,
            "init.noise_variance" => t.init.noise_variance = parse_value(key, v)?,
            "data.train" => d.train = Some(PathBuf::from(v)),
            "data.test" => d.test = Some(PathBuf::from(v)),
            "data.test_fraction" => d.test_fraction = parse_value(key, v)?,
            "data.seed" => d.seed = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.layers == 0 {
            return Err(Error::Config("model.layers must be at least 1".into()));
        }
        if !m.hidden_dims.is_empty() && m.hidden_dims.len() != m.layers - 1 {
            return Err(Error::Config(format!(
                "model.hidden_dims has {} entries, expected layers - 1 = {}",
                m.hidden_dims.len(),
                m.layers - 1
            )));
        }
        if m.hidden_dims.contains(&0) || m.frequencies == 0 || m.train_samples == 0 || m.eval_samples == 0 {
            return Err(Error::Config("model widths, M and sample counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config("data.test_fraction must lie in [0, 1)".into()));
        }
        self.train_config().validate()
    }

    /// Architecture for data with `input_dim` columns.
    pub fn architecture(&self, input_dim: usize) -> Architecture {
        let m = &self.model;
        let hidden_dims = if m.hidden_dims.is_empty() { vec![input_dim; m.layers - 1] } else { m.hidden_dims.clone() };
        let kind = if m.feature_kind == FeatureKind::Vff { FeatureKind::Vfrf } else { m.feature_kind };
        Architecture { input_dim, hidden_dims, order: m.order, frequencies: m.frequencies, kind }
    }

    /// Training settings with the interval copied in and, for the `vff`
    /// kind, `α = 1`, `β = 1e-6` pinned and frozen for every epoch.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train;
        t.init.interval_a = self.model.interval_a;
        t.init.interval_b = self.model.interval_b;
        if self.model.feature_kind == FeatureKind::Vff {
            t.init.alpha = 1.0;
            t.init.beta = VFF_PINNED_BETA;
            t.beta_freeze_epochs = t.epochs;
        }
        t
    }

    /// Every setting as `config.section.key = value`, defaults included.
    pub fn echo(&self) -> Vec<(String, String)> {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let hidden = m.hidden_dims.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(" ");
        [
            ("model.order", m.order.label().to_string()),
            ("model.layers", m.layers.to_string()),
            ("model.hidden_dims", hidden),
            ("model.M", m.frequencies.to_string()),
            ("model.interval_a", m.interval_a.to_string()),
            ("model.interval_b", m.interval_b.to_string()),
            ("model.feature_kind", m.feature_kind.label().to_string()),
            ("model.train_samples", m.train_samples.to_string()),
            ("model.eval_samples", m.eval_samples.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.beta_freeze_epochs", t.beta_freeze_epochs.to_string()),
            ("init.lengthscale", t.init.lengthscale.to_string()),
            ("init.alpha", t.init.alpha.to_string()),
            ("init.beta", t.init.beta.to_string()),
            ("init.kernel_variance", t.init.kernel_variance.to_string()),
            ("init.noise_variance", t.init.noise_variance.to_string()),
            ("data.train", path(&d.train)),
            ("data.test", path(&d.test)),
            ("data.test_fraction", d.test_fraction.to_string()),
            ("data.seed", d.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("config.{k}"), v))
        .collect()
    }

    /// Rebuilds a configuration from echoed `config.*` entries.
    pub fn from_echo<'a>(entries: impl IntoIterator<Item = (&'a String, &'a String)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in entries {
            if let Some(key) = k.strip_prefix("config.") {
                if v.is_empty() && key.starts_with("data.") {
                    continue;
                }
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.init.beta, 0.01);
    }

    #[test]
    fn parses_sections_and_comments() {
        let cfg = RunConfig::parse(
            "model.order = 5/2  # smoother\nmodel.layers = 3\nmodel.hidden_dims = 2, 4\nmodel.M = 7\ntrain.epochs = 12\ninit.alpha=2\ndata.test_fraction = 0.2\n",
        )
        .unwrap();
        assert_eq!(cfg.model.order, MaternOrder::FiveHalves);
        assert_eq!(cfg.model.hidden_dims, vec![2, 4]);
        assert_eq!(cfg.architecture(1).widths(), vec![1, 2, 4, 1]);
        assert_eq!(cfg.train.epochs, 12);
        assert_eq!(cfg.train.init.alpha, 2.0);
    }

    #[test]
    fn hidden_width_defaults_to_input_width() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.architecture(3).widths(), vec![3, 3, 1]);
    }

    #[test]
    fn vff_kind_pins_and_freezes() {
        let cfg = RunConfig::parse("model.feature_kind = vff\ntrain.epochs = 5\ninit.beta = 0.3\n").unwrap();
        let t = cfg.train_config();
        assert_eq!((t.init.alpha, t.init.beta, t.beta_freeze_epochs), (1.0, VFF_PINNED_BETA, 5));
        assert_eq!(cfg.architecture(1).kind, FeatureKind::Vfrf);
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["model.bogus = 1", "model.layers = two", "no equals sign", "model.layers = 0", "model.layers = 2\nmodel.hidden_dims = 1 2"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::parse("model.M = 4\ntrain.seed = 9\ndata.train = a.csv\nmodel.hidden_dims = 3\n").unwrap();
        let echo = cfg.echo();
        let back = RunConfig::from_echo(echo.iter().map(|(k, v)| (k, v))).unwrap();
        assert_eq!(back, cfg);
    }
}
