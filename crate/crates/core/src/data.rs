//! Datasets: synthetic surrogate tasks, CSV ingestion, standardization and
//! train/validation/test splits.
//!
//! Internally features are `n_features x n_samples` and targets
//! `m_targets x n_samples`, one sample per column.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::{dopri5_solve, StepControl};

/// Per-row shift and scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Stats {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl Stats {
    pub fn identity(rows: usize) -> Self {
        Self {
            mean: DVector::zeros(rows),
            std: DVector::from_element(rows, 1.0),
        }
    }

    /// Row means and population standard deviations; rows with zero spread
    /// get a standard deviation of 1.
    pub fn from_rows(m: &DMatrix<f64>) -> Self {
        let n = m.ncols().max(1) as f64;
        let mean = m.column_sum() / n;
        let std = DVector::from_fn(m.nrows(), |r, _| {
            let var = m.row(r).iter().map(|v| (v - mean[r]).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        });
        Self { mean, std }
    }

    /// `(x - mean) / std` row by row.
    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| (m[(r, c)] - self.mean[r]) / self.std[r])
    }

    /// Inverse of [`Stats::apply`].
    pub fn invert(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)] * self.std[r] + self.mean[r])
    }

    /// Stats equivalent to applying `self` and then `inner`.
    fn then(&self, inner: &Stats) -> Stats {
        Stats {
            mean: &self.mean + self.std.component_mul(&inner.mean),
            std: self.std.component_mul(&inner.std),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    /// Maps the stored features back to original units.
    pub feature_stats: Stats,
    /// Maps the stored targets (and predictions) back to original units.
    pub target_stats: Stats,
}

impl Dataset {
    /// Raw dataset with identity statistics.
    pub fn new(features: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        if features.ncols() != targets.ncols() {
            return Err(Error::Shape(format!(
                "{} feature samples but {} target samples",
                features.ncols(),
                targets.ncols()
            )));
        }
        Ok(Self {
            feature_stats: Stats::identity(features.nrows()),
            target_stats: Stats::identity(targets.nrows()),
            features,
            targets,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_features(&self) -> usize {
        self.features.nrows()
    }

    pub fn m_targets(&self) -> usize {
        self.targets.nrows()
    }

    fn select(&self, idx: &[usize]) -> Dataset {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])]);
        Dataset {
            features: pick(&self.features),
            targets: pick(&self.targets),
            feature_stats: self.feature_stats.clone(),
            target_stats: self.target_stats.clone(),
        }
    }

    fn with_stats(&self, fs: &Stats, ts: &Stats) -> Dataset {
        Dataset {
            features: fs.apply(&self.features),
            targets: ts.apply(&self.targets),
            feature_stats: self.feature_stats.then(fs),
            target_stats: self.target_stats.then(ts),
        }
    }

    /// Features and targets in original units.
    pub fn destandardize(&self) -> Dataset {
        Dataset {
            features: self.feature_stats.invert(&self.features),
            targets: self.target_stats.invert(&self.targets),
            feature_stats: Stats::identity(self.n_features()),
            target_stats: Stats::identity(self.m_targets()),
        }
    }

    /// Predictions made on standardized targets, in original units.
    pub fn destandardize_targets(&self, pred: &DMatrix<f64>) -> DMatrix<f64> {
        self.target_stats.invert(pred)
    }
}

/// Rescales every row to zero mean and unit standard deviation using the
/// dataset's own statistics.
pub fn standardize(ds: &Dataset) -> Dataset {
    ds.with_stats(&Stats::from_rows(&ds.features), &Stats::from_rows(&ds.targets))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateKind {
    Smooth,
    Ode,
}

impl std::str::FromStr for SurrogateKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" => Ok(Self::Smooth),
            "ode" => Ok(Self::Ode),
            _ => Err(Error::Config(format!("unknown synthetic task `{s}` (smooth, ode)"))),
        }
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn uniform_inputs(n: usize, samples: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let u = Uniform::new_inclusive(-1.0, 1.0).unwrap();
    DMatrix::from_fn(n, samples, |_, _| u.sample(rng))
}

/// `c = tanh(B2 tanh(B1 y))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothMap {
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
}

impl SmoothMap {
    pub const HIDDEN: usize = 32;

    pub fn new(n_features: usize, m_targets: usize, rng: &mut ChaCha8Rng) -> Self {
        let b1 = gaussian(Self::HIDDEN, n_features, 1.5 / (n_features as f64).sqrt(), rng);
        let b2 = gaussian(m_targets, Self::HIDDEN, 1.5 / (Self::HIDDEN as f64).sqrt(), rng);
        Self { b1, b2 }
    }

    pub fn eval(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        (&self.b2 * (&self.b1 * y).map(f64::tanh)).map(f64::tanh)
    }
}

/// `c = x(1)` with `x' = (sum_k y_k M_k) x`, `x(0) = x0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParametricOde {
    pub mats: Vec<DMatrix<f64>>,
    pub x0: DVector<f64>,
}

impl ParametricOde {
    pub fn new(n_features: usize, m_targets: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / ((n_features * m_targets) as f64).sqrt();
        let mats = (0..n_features)
            .map(|_| gaussian(m_targets, m_targets, scale, rng))
            .collect();
        let x0 = gaussian(m_targets, 1, 1.0, rng).column(0).normalize();
        Self { mats, x0 }
    }

    pub fn system_matrix(&self, y: &[f64]) -> DMatrix<f64> {
        let m = self.x0.len();
        self.mats
            .iter()
            .zip(y)
            .fold(DMatrix::zeros(m, m), |acc, (mk, yk)| acc + mk * *yk)
    }

    /// Final state for one parameter vector.
    pub fn eval_one(&self, y: &[f64]) -> Result<DVector<f64>> {
        let a = self.system_matrix(y);
        let ctrl = StepControl::with_tolerances(1e-10, 1e-12);
        let rec = dopri5_solve(
            |_, x, out| {
                let v = &a * DVector::from_column_slice(x);
                out.copy_from_slice(v.as_slice());
            },
            self.x0.as_slice(),
            (0.0, 1.0),
            &ctrl,
            &[],
        )?;
        Ok(DVector::from_column_slice(rec.final_state()))
    }

    pub fn eval(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.x0.len(), y.ncols());
        for (j, col) in y.column_iter().enumerate() {
            let v = self.eval_one(col.clone_owned().as_slice())?;
            out.set_column(j, &v);
        }
        Ok(out)
    }
}

/// Synthetic regression task, a pure function of its arguments. The
/// generator matrices are drawn first, then the inputs `y ~ U[-1, 1]^n`.
pub fn synth_surrogate(
    kind: SurrogateKind,
    n_features: usize,
    m_targets: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_features == 0 || m_targets == 0 || n_samples == 0 {
        return Err(Error::Config(
            "synthetic task needs at least one feature, target and sample".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SurrogateKind::Smooth => {
            let map = SmoothMap::new(n_features, m_targets, &mut rng);
            let y = uniform_inputs(n_features, n_samples, &mut rng);
            let c = map.eval(&y);
            Dataset::new(y, c)
        }
        SurrogateKind::Ode => {
            let ode = ParametricOde::new(n_features, m_targets, &mut rng);
            let y = uniform_inputs(n_features, n_samples, &mut rng);
            let c = ode.eval(&y)?;
            Dataset::new(y, c)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// One sample per CSV line.
    SamplesAsRows,
    /// One sample per CSV column.
    SamplesAsCols,
}

fn parse_err(path: &Path, line: usize, column: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        msg: msg.into(),
    }
}

/// Reads a headerless numeric CSV as a row-major grid.
fn read_grid(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, 0, e.to_string())
        })?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(
                    path,
                    line,
                    record.len().min(w) + 1,
                    format!("expected {w} fields, found {}", record.len()),
                ))
            }
            _ => {}
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, line, col + 1, format!("not a number: `{cell}`")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, col + 1, format!("non-finite value `{cell}`")));
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = width.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(parse_err(path, 1, 1, "file holds no data"));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Loads features and targets from two headerless numeric CSV files.
pub fn load_csv(
    features_path: &Path,
    targets_path: &Path,
    orientation: Orientation,
) -> Result<Dataset> {
    let orient = |m: DMatrix<f64>| match orientation {
        Orientation::SamplesAsCols => m,
        Orientation::SamplesAsRows => m.transpose(),
    };
    let features = orient(read_grid(features_path)?);
    let targets = orient(read_grid(targets_path)?);
    Dataset::new(features, targets)
}

fn default_fractions() -> [f64; 3] {
    [0.7, 0.2, 0.1]
}

/// Split proportions `(train, val, test)` and the permutation seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fractions: default_fractions(),
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = self.fractions;
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be non-negative and sum to 1, got {f:?}"
            )));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for `n` samples; the test split takes the
    /// remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let n_train = ((self.fractions[0] * n as f64).round() as usize).min(n);
        let n_val = ((self.fractions[1] * n as f64).round() as usize).min(n - n_train);
        (n_train, n_val, n - n_train - n_val)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Original sample indices of each split.
    pub indices: [Vec<usize>; 3],
}

/// Seeded permutation followed by contiguous cuts. All three splits are
/// standardized with statistics of the training split.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let n = ds.n_samples();
    let (n_train, n_val, _) = spec.sizes(n);
    if n_train == 0 {
        return Err(Error::EmptyTrainSplit);
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let train_idx = perm[..n_train].to_vec();
    let val_idx = perm[n_train..n_train + n_val].to_vec();
    let test_idx = perm[n_train + n_val..].to_vec();

    let raw_train = ds.select(&train_idx);
    let fs = Stats::from_rows(&raw_train.features);
    let ts = Stats::from_rows(&raw_train.targets);
    Ok(Splits {
        train: raw_train.with_stats(&fs, &ts),
        val: ds.select(&val_idx).with_stats(&fs, &ts),
        test: ds.select(&test_idx).with_stats(&fs, &ts),
        indices: [train_idx, val_idx, test_idx],
    })
}

/// Reproducibility record written next to run outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSidecar {
    pub source: String,
    pub orientation: Option<Orientation>,
    pub n_features: usize,
    pub m_targets: usize,
    pub n_samples: usize,
    pub split: SplitSpec,
    pub split_sizes: [usize; 3],
}

impl DataSidecar {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("sidecar serializes");
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| {
            parse_err(
                &PathBuf::from(path),
                e.line(),
                e.column(),
                format!("data sidecar: {e}"),
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn elm_template_sizes() {
        assert_eq!(SplitSpec::default().sizes(2486), (1740, 497, 249));
    }

    #[test]
    fn zero_b2_gives_zero_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut map = SmoothMap::new(3, 2, &mut rng);
        map.b2.fill(0.0);
        let y = uniform_inputs(3, 5, &mut rng);
        assert_eq!(map.eval(&y), DMatrix::zeros(2, 5));
    }

    #[test]
    fn zero_system_matrix_keeps_initial_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ode = ParametricOde::new(3, 4, &mut rng);
        let x = ode.eval_one(&[0.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(x, ode.x0, epsilon = 1e-14);
    }

    #[test]
    fn constant_row_is_clamped() {
        let ds = Dataset::new(
            DMatrix::from_row_slice(2, 3, &[5.0, 5.0, 5.0, 1.0, 2.0, 3.0]),
            DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0]),
        )
        .unwrap();
        let s = standardize(&ds);
        assert_eq!(s.features.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0; 3]);
        assert_eq!(s.feature_stats.std[0], 1.0);
        assert_eq!(s.feature_stats.mean[0], 5.0);
    }
}
