//! ADAM and the mini-batch training loop.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::{EvalCounter, ModelConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gradients::{data_misfit, model_gradient};
use crate::integrators::StepControl;
use crate::model::{GradBundle, Model, Params};

/// Moment estimates and hyperparameters of ADAM.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state for `n` parameters with the usual defaults
    /// (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`).
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.lr.is_finite()
            && self.lr > 0.0
            && self.m.len() == self.v.len();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid ADAM state (lr {}, beta1 {}, beta2 {}, eps {})",
                self.lr, self.beta1, self.beta2, self.eps
            )))
        }
    }
}

/// One ADAM update of a flat parameter vector, in place.
pub fn adam_step_flat(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    state.validate()?;
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "ADAM: {} parameters, {} gradients, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step_count += 1;
    let k = state.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(k);
    let c2 = 1.0 - state.beta2.powi(k);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// [`adam_step_flat`] over every block of a parameter set.
pub fn adam_step(params: &mut Params, grads: &GradBundle, state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape("parameter and gradient sets differ".into()));
    }
    let mut flat = params.to_flat();
    adam_step_flat(&mut flat, &grads.to_flat(), state)?;
    params.assign_flat(&flat);
    Ok(())
}

fn default_epochs() -> usize {
    1000
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Stop after the first epoch whose full training misfit falls below this.
    #[serde(default)]
    pub loss_tolerance: Option<f64>,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Solver settings for neural ODE forward and adjoint solves.
    #[serde(default)]
    pub ode: StepControl,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            seed: 0,
            loss_tolerance: None,
            shuffle: true,
            ode: StepControl::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Some(tol) = self.loss_tolerance {
            if !(tol.is_finite() && tol >= 0.0) {
                return Err(Error::Config(format!("invalid loss tolerance {tol}")));
            }
        }
        self.ode.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    /// Full training-set data misfit after the epoch.
    pub train_loss: f64,
    /// Full validation-set data misfit, `None` without a validation split.
    pub val_loss: Option<f64>,
    /// Residual-function evaluations spent on training gradients so far.
    pub cum_rhs_evals: u64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rows: Vec<MetricRow>,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,cum_rhs_evals,wall_ms";

impl RunMetrics {
    /// CSV with [`METRICS_HEADER`]. Losses use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let val = r.val_loss.map(|v| format!("{v:?}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{:?},{},{},{}",
                r.epoch, r.train_loss, val, r.cum_rhs_evals, r.wall_ms
            );
        }
        s
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }

    /// Cumulative evaluations at the first epoch with `train_loss <= target`.
    pub fn evals_to_reach(&self, target: f64) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r.train_loss <= target)
            .map(|r| r.cum_rhs_evals)
    }
}

/// Random initial parameters.
///
/// Opening and closing matrices have entries of standard deviation
/// `1/sqrt(fan_in)` and zero biases. Only the constant part of the weights is
/// random: the first coefficient column of `Theta` (std `0.1/sqrt(w+1)`) and,
/// for basis `none`, the same draw in every column. All bases and degrees
/// therefore start from the same network for a given seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::zeros(cfg);
    let w = cfg.layer_width();

    let k_in = &mut params.open.k_in;
    let normal = Normal::new(0.0, 1.0 / (cfg.n_features as f64).sqrt()).unwrap();
    for r in 0..k_in.nrows() {
        for c in 0..k_in.ncols() {
            k_in[(r, c)] = normal.sample(&mut rng);
        }
    }

    let theta = &mut params.theta.theta;
    let normal = Normal::new(0.0, 0.1 / ((w + 1) as f64).sqrt()).unwrap();
    let col: Vec<f64> = (0..theta.nrows()).map(|_| normal.sample(&mut rng)).collect();
    let n_cols = if cfg.basis.is_polynomial() { 1 } else { theta.ncols() };
    for j in 0..n_cols {
        theta.column_mut(j).copy_from_slice(&col);
    }

    let w_out = &mut params.close.w_out;
    let normal = Normal::new(0.0, 1.0 / (cfg.channels as f64).sqrt()).unwrap();
    for r in 0..w_out.nrows() {
        for c in 0..w_out.ncols() {
            w_out[(r, c)] = normal.sample(&mut rng);
        }
    }
    params
}

fn gather_columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

/// Data misfit of `model` on a whole dataset; evaluations are not counted.
pub fn evaluate(model: &Model, ds: &Dataset, ode: &StepControl) -> Result<f64> {
    let pred = model.predict(&ds.features, &EvalCounter::new(), ode)?;
    Ok(data_misfit(&pred, &ds.targets))
}

/// [`train_with`] without an epoch callback.
pub fn train(
    model: Model,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    tcfg: &TrainConfig,
) -> Result<(Model, RunMetrics)> {
    train_with(model, train_set, val_set, tcfg, |_| {})
}

/// Shuffled mini-batch ADAM.
///
/// After each epoch the full training and validation misfits are recorded
/// and `on_epoch` is called with the new row. A non-finite loss or gradient
/// stops training with [`Error::Diverged`], carrying the parameters from
/// before the failing step.
pub fn train_with<F>(
    mut model: Model,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    tcfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(Model, RunMetrics)>
where
    F: FnMut(&MetricRow),
{
    tcfg.validate()?;
    model.cfg.validate()?;
    let n = train_set.n_samples();
    if n == 0 {
        return Err(Error::EmptyTrainSplit);
    }
    for ds in std::iter::once(train_set).chain(val_set) {
        if ds.features.nrows() != model.cfg.n_features || ds.targets.nrows() != model.cfg.m_targets {
            return Err(Error::Shape(format!(
                "dataset is {} -> {}, model is {} -> {}",
                ds.features.nrows(),
                ds.targets.nrows(),
                model.cfg.n_features,
                model.cfg.m_targets
            )));
        }
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    shuffle_rng.set_stream(1);
    let mut adam = AdamState::new(model.params.len(), tcfg.lr);
    let counter = EvalCounter::new();
    let mut metrics = RunMetrics::default();
    let mut order: Vec<usize> = (0..n).collect();
    let start = Instant::now();

    for epoch in 1..=tcfg.epochs {
        if tcfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        for batch in order.chunks(tcfg.batch_size) {
            let y = gather_columns(&train_set.features, batch);
            let c = gather_columns(&train_set.targets, batch);
            let (loss, grads) = model_gradient(&model, &y, &c, &tcfg.ode, &counter)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(diverged(epoch, model));
            }
            let previous = model.params.clone();
            adam_step(&mut model.params, &grads, &mut adam)?;
            if !model.params.is_finite() {
                model.params = previous;
                return Err(diverged(epoch, model));
            }
        }
        let train_loss = evaluate(&model, train_set, &tcfg.ode)?;
        let val_loss = val_set.map(|v| evaluate(&model, v, &tcfg.ode)).transpose()?;
        if !train_loss.is_finite() || val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(diverged(epoch, model));
        }
        let row = MetricRow {
            epoch,
            train_loss,
            val_loss,
            cum_rhs_evals: counter.get(),
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&row);
        metrics.rows.push(row);
        if tcfg.loss_tolerance.is_some_and(|tol| train_loss < tol) {
            break;
        }
    }
    Ok((model, metrics))
}

fn diverged(epoch: usize, model: Model) -> Error {
    Error::Diverged {
        epoch,
        last_good: Box::new(model),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2, 0.1);
        adam_step_flat(&mut p, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [3.0, -0.02, 1e3] {
            let mut p = vec![0.0];
            let mut st = AdamState::new(1, 1e-3);
            adam_step_flat(&mut p, &[g], &mut st).unwrap();
            let expected = -1e-3 * g / (g.abs() * (1.0 + 1e-8 / g.abs()));
            assert_relative_eq!(p[0], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut st = AdamState::new(2, 0.1);
        assert!(matches!(
            adam_step_flat(&mut [0.0; 3], &[0.0; 3], &mut st),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn metrics_csv_layout() {
        let m = RunMetrics {
            rows: vec![MetricRow {
                epoch: 1,
                train_loss: 0.5,
                val_loss: None,
                cum_rhs_evals: 12,
                wall_ms: 3,
            }],
        };
        assert_eq!(m.to_csv(), format!("{METRICS_HEADER}\n1,0.5,,12,3\n"));
        assert_eq!(m.evals_to_reach(0.6), Some(12));
        assert_eq!(m.evals_to_reach(0.4), None);
    }
}
