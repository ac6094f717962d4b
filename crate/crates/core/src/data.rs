//! Datasets, normalization, the synthetic step-function generator and
//! evaluation metrics.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::deep::PredictiveDist;
use crate::error::{Error, Result};

/// Width of the normalized input range `[0, INPUT_RANGE]`.
pub const INPUT_RANGE: f64 = 3.0;

/// A numeric CSV file: header plus an `N × C` body.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: DMatrix<f64>,
}

/// Parses CSV text with a header row. Every body cell must be numeric and
/// every row must have as many cells as the header.
pub fn parse_csv(text: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse(format!("CSV header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() {
        return Err(Error::Parse("empty CSV file".into()));
    }
    let mut values = Vec::new();
    let mut n = 0;
    for record in reader.records() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { pos, len, expected_len } => Error::Parse(format!(
                "row {}: {len} cells, header has {expected_len}",
                pos.as_ref().map_or(0, |p| p.line())
            )),
            _ => Error::Parse(e.to_string()),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Parse(format!("row {line}, column {}: '{cell}' is not a number", col + 1)))?;
            values.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Parse("CSV file has no data rows".into()));
    }
    Ok(Table { rows: DMatrix::from_row_slice(n, header.len(), &values), header })
}

pub fn read_csv(path: &Path) -> Result<Table> {
    parse_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × D`.
    pub inputs: DMatrix<f64>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, targets: Vec<f64>) -> Result<Self> {
        if inputs.nrows() != targets.len() {
            return Err(Error::Dimension(format!("{} input rows, {} targets", inputs.nrows(), targets.len())));
        }
        Ok(Self { inputs, targets })
    }

    /// Splits a table whose last column is the target.
    pub fn from_table(table: &Table) -> Result<Self> {
        let c = table.rows.ncols();
        if c < 2 {
            return Err(Error::Parse("need at least one feature column and a target column".into()));
        }
        Self::new(table.rows.columns(0, c - 1).into_owned(), table.rows.column(c - 1).iter().copied().collect())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(rows),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    /// CSV text with columns `x0..x{D-1},y`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let names: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).chain(["y".to_string()]).collect();
        let _ = writeln!(out, "{}", names.join(","));
        for i in 0..self.len() {
            for j in 0..self.dim() {
                let _ = write!(out, "{},", self.inputs[(i, j)]);
            }
            let _ = writeln!(out, "{}", self.targets[i]);
        }
        out
    }
}

/// Loads a CSV whose last column is the target.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    Dataset::from_table(&read_csv(path)?)
}

/// Random train/test split; `test_fraction` of the rows (rounded) go to test.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} is outside [0, 1)")));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (test_fraction * data.len() as f64).round() as usize;
    if n_test >= data.len() {
        return Err(Error::Config("the split leaves no training rows".into()));
    }
    let (test, train) = idx.split_at(n_test);
    Ok((data.select(train), data.select(test)))
}

/// Affine maps taking training inputs to `[0, 3]` per column and targets to
/// zero mean and unit population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Transforms {
    pub input_min: Vec<f64>,
    /// `max − min` per column; zero flags a constant column (mapped to 1.5).
    pub input_range: Vec<f64>,
    pub target_mean: f64,
    /// Population standard deviation, or 1 when the targets are constant.
    pub target_std: f64,
}

impl Transforms {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::domain("cannot fit transforms on an empty dataset"));
        }
        let (mut input_min, mut input_range) = (Vec::new(), Vec::new());
        for col in train.inputs.column_iter() {
            let lo = col.min();
            input_min.push(lo);
            input_range.push(col.max() - lo);
        }
        let n = train.len() as f64;
        let target_mean = train.targets.iter().sum::<f64>() / n;
        let var = train.targets.iter().map(|y| (y - target_mean).powi(2)).sum::<f64>() / n;
        let target_std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self { input_min, input_range, target_mean, target_std })
    }

    fn check(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_min.len() {
            return Err(Error::Dimension(format!("{} input columns, transforms fitted on {}", x.ncols(), self.input_min.len())));
        }
        Ok(())
    }

    pub fn apply_inputs(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(x)?;
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            let r = self.input_range[j];
            if r > 0.0 {
                INPUT_RANGE * (x[(i, j)] - self.input_min[j]) / r
            } else {
                INPUT_RANGE / 2.0
            }
        }))
    }

    pub fn invert_inputs(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(x)?;
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| self.input_min[j] + x[(i, j)] * self.input_range[j] / INPUT_RANGE))
    }

    pub fn apply_targets(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.target_mean) / self.target_std).collect()
    }

    pub fn invert_targets(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| self.target_mean + v * self.target_std).collect()
    }

    /// Maps a predictive distribution over standardized targets back to
    /// original units.
    pub fn invert_predictive(&self, pred: &PredictiveDist) -> PredictiveDist {
        pred.affine(self.target_mean, self.target_std)
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        Dataset::new(self.apply_inputs(&data.inputs)?, self.apply_targets(&data.targets))
    }

    /// `key = values` lines for model files.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        vec![
            ("transform.input_min".into(), join(&self.input_min)),
            ("transform.input_range".into(), join(&self.input_range)),
            ("transform.target_mean".into(), self.target_mean.to_string()),
            ("transform.target_std".into(), self.target_std.to_string()),
        ]
    }

    pub fn from_meta(meta: &std::collections::BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| meta.get(k).ok_or_else(|| Error::Parse(format!("model file is missing '{k}'")));
        let floats = |k: &str| -> Result<Vec<f64>> {
            get(k)?
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| Error::Parse(format!("'{k}': cannot parse '{s}'"))))
                .collect()
        };
        let input_min = floats("transform.input_min")?;
        let input_range = floats("transform.input_range")?;
        if input_min.len() != input_range.len() {
            return Err(Error::Parse("transform input vectors differ in length".into()));
        }
        let scalar = |k: &str| -> Result<f64> {
            let v = floats(k)?;
            if v.len() != 1 {
                return Err(Error::Parse(format!("'{k}' must be a single value")));
            }
            Ok(v[0])
        };
        Ok(Self { input_min, input_range, target_mean: scalar("transform.target_mean")?, target_std: scalar("transform.target_std")? })
    }
}

/// Noisy step function on `[0, 1]`: `f(t) = floor(steps·t)/(steps−1)`
/// clipped to `[0, 1]`, plus Gaussian noise.
pub fn multistep_synthetic(n_points: usize, n_steps: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n_steps < 2 {
        return Err(Error::domain("the step function needs at least two steps"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::domain("noise standard deviation must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::domain(e.to_string()))?;
    let t: Vec<f64> = (0..n_points).map(|_| rng.random::<f64>()).collect();
    let y = t.iter().map(|&ti| step_function(ti, n_steps) + noise.sample(&mut rng)).collect();
    Dataset::new(DMatrix::from_vec(n_points, 1, t), y)
}

pub fn step_function(t: f64, n_steps: usize) -> f64 {
    ((n_steps as f64 * t).floor() / (n_steps - 1) as f64).clamp(0.0, 1.0)
}

/// `(rmse, nmll)` of a predictive mixture against targets in the same units.
pub fn metrics(pred: &PredictiveDist, y: &[f64]) -> Result<(f64, f64)> {
    let dens = pred.log_density(y)?;
    let n = y.len() as f64;
    let mean = pred.mean();
    let rmse = (mean.iter().zip(y).map(|(m, t)| (m - t).powi(2)).sum::<f64>() / n).sqrt();
    let nmll = -dens.iter().sum::<f64>() / n;
    Ok((rmse, nmll))
}

/// Prediction CSV: `input…,mean,std,nmll_point`; the last column is empty
/// when no targets are given.
pub fn prediction_csv(input_names: &[String], inputs: &DMatrix<f64>, pred: &PredictiveDist, y: Option<&[f64]>) -> Result<String> {
    if inputs.nrows() != pred.len() || input_names.len() != inputs.ncols() {
        return Err(Error::Dimension("prediction rows or input names do not match the inputs".into()));
    }
    let dens = y.map(|y| pred.log_density(y)).transpose()?;
    let (mean, var) = (pred.mean(), pred.variance());
    let mut out = String::new();
    let _ = writeln!(out, "{},mean,std,nmll_point", input_names.join(","));
    for i in 0..inputs.nrows() {
        for j in 0..inputs.ncols() {
            let _ = write!(out, "{},", inputs[(i, j)]);
        }
        let _ = write!(out, "{},{},", mean[i], var[i].sqrt());
        if let Some(d) = &dens {
            let _ = write!(out, "{}", -d[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_two_row_file() {
        let d = Dataset::from_table(&parse_csv("x,y\n0,1\n1,2\n").unwrap()).unwrap();
        assert_eq!(d.inputs, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
        assert_eq!(d.targets, vec![1.0, 2.0]);
        let d3 = Dataset::from_table(&parse_csv("a,b,c,y\n1,2,3,4\n").unwrap()).unwrap();
        assert_eq!(d3.dim(), 3);
    }

    #[test]
    fn reports_parse_errors() {
        assert!(matches!(parse_csv("x,y\n"), Err(Error::Parse(_))));
        assert!(matches!(parse_csv(""), Err(Error::Parse(_))));
        let e = parse_csv("x,y\n1,2\n3,oops\n").unwrap_err().to_string();
        assert!(e.contains("row 3") && e.contains("column 2"), "{e}");
        assert!(parse_csv("x,y\n1,2,3\n").unwrap_err().to_string().contains("row 2"));
    }

    #[test]
    fn transform_examples() {
        let d = Dataset::new(DMatrix::from_row_slice(3, 2, &[10.0, 5.0, 20.0, 5.0, 15.0, 5.0]), vec![1.0, 3.0, 2.0]).unwrap();
        let t = Transforms::fit(&d).unwrap();
        let x = t.apply_inputs(&d.inputs).unwrap();
        assert_eq!(x.column(0).as_slice(), &[0.0, 3.0, 1.5]);
        assert_eq!(x.column(1).as_slice(), &[1.5, 1.5, 1.5]);
        let y = Transforms::fit(&Dataset::new(DMatrix::zeros(2, 1), vec![1.0, 3.0]).unwrap()).unwrap();
        assert_eq!(y.apply_targets(&[1.0, 3.0]), vec![-1.0, 1.0]);
    }

    #[test]
    fn step_examples() {
        assert_eq!(step_function(0.05, 5), 0.0);
        assert_eq!(step_function(0.95, 5), 1.0);
        let a = multistep_synthetic(300, 5, 0.05, 9).unwrap();
        assert_eq!(a, multistep_synthetic(300, 5, 0.05, 9).unwrap());
        assert!(a.inputs.iter().all(|t| (0.0..1.0).contains(t)));
        let clean = multistep_synthetic(50, 5, 0.0, 1).unwrap();
        for i in 0..50 {
            assert_eq!(clean.targets[i], step_function(clean.inputs[(i, 0)], 5));
        }
    }

    #[test]
    fn metric_examples() {
        let p = PredictiveDist::from_components(vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let (rmse, nmll) = metrics(&p, &[0.0]).unwrap();
        assert_eq!(rmse, 0.0);
        assert!((nmll - 0.918938533204673).abs() < 1e-12);
        let p2 = PredictiveDist::from_components(vec![vec![1.0], vec![-1.0]], vec![vec![1.0], vec![1.0]]).unwrap();
        assert!((metrics(&p2, &[0.0]).unwrap().1 - 1.418938533204673).abs() < 1e-12);
    }

    #[test]
    fn split_partitions_rows() {
        let d = multistep_synthetic(20, 3, 0.1, 2).unwrap();
        let (tr, te) = split(&d, 0.25, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (15, 5));
        let mut all: Vec<f64> = tr.targets.iter().chain(&te.targets).copied().collect();
        let mut orig = d.targets.clone();
        all.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(all, orig);
    }

    #[test]
    fn prediction_csv_layout() {
        let p = PredictiveDist::from_components(vec![vec![0.5, 1.0]], vec![vec![4.0, 1.0]]).unwrap();
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let text = prediction_csv(&["t".into()], &x, &p, None).unwrap();
        assert_eq!(text, "t,mean,std,nmll_point\n0,0.5,2,\n1,1,1,\n");
    }

    proptest! {
        #[test]
        fn transforms_round_trip(rows in proptest::collection::vec((-1e3f64..1e3, -5f64..5.0, -1e2f64..1e2), 2..30)) {
            let x = DMatrix::from_fn(rows.len(), 2, |i, j| if j == 0 { rows[i].0 } else { rows[i].1 });
            let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let d = Dataset::new(x.clone(), y.clone()).unwrap();
            let t = Transforms::fit(&d).unwrap();
            let fx = t.apply_inputs(&x).unwrap();
            for j in 0..2 {
                if t.input_range[j] > 0.0 {
                    prop_assert!(fx.column(j).min().abs() < 1e-12 && (fx.column(j).max() - 3.0).abs() < 1e-12);
                    let back = t.invert_inputs(&fx).unwrap();
                    for i in 0..x.nrows() {
                        prop_assert!((back[(i, j)] - x[(i, j)]).abs() <= 1e-10 * x[(i, j)].abs().max(t.input_range[j]));
                    }
                }
            }
            let by = t.invert_targets(&t.apply_targets(&y));
            for (a, b) in by.iter().zip(&y) {
                prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(t.target_std));
            }
        }

        #[test]
        fn nmll_improves_as_means_approach_targets(y in -3f64..3.0, off in 0.1f64..2.0, v in 0.1f64..2.0) {
            let far = PredictiveDist::from_components(vec![vec![y + off]], vec![vec![v]]).unwrap();
            let near = PredictiveDist::from_components(vec![vec![y + off / 2.0]], vec![vec![v]]).unwrap();
            prop_assert!(metrics(&near, &[y]).unwrap().1 < metrics(&far, &[y]).unwrap().1);
        }
    }
}
