//! Network building blocks and forward dynamics.
//!
//! The residual function is a single layer with the normalized time appended
//! as an extra input feature:
//!
//! ```text
//! f(u, s; K, b) = act(K [u; s 1^T] + b 1^T)
//! ```
//!
//! `K` has one more column than there are channels; its last column multiplies
//! the time feature. `K` and `b` of one layer are flattened into a single
//! parameter vector (row-major `K`, then `b`) so that one coefficient matrix
//! `Theta` parameterizes everything that varies in time.
//!
//! Three dynamics share these blocks: a forward-Euler ResNet, a Verlet
//! (Hamiltonian) network with a split `(y, z)` state and a neural ODE whose
//! vector field is evaluated at continuous times.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{build_basis_matrix, BasisKind, TimeGrid};
use crate::error::{Error, Result};
use crate::integrators::{euler_step, verlet_step};

/// Hidden state of a mini-batch, `channels x batch`.
pub type StateBatch = DMatrix<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    #[serde(alias = "resnet")]
    ResNet,
    Hamiltonian,
    #[serde(rename = "node", alias = "neuralode")]
    NeuralOde,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::ResNet => "resnet",
            Arch::Hamiltonian => "hamiltonian",
            Arch::NeuralOde => "node",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resnet" => Ok(Arch::ResNet),
            "hamiltonian" | "ham" => Ok(Arch::Hamiltonian),
            "node" | "neuralode" | "neural-ode" => Ok(Arch::NeuralOde),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    /// Linear layers; used for closed-form checks.
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output value.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    fn apply_in_place(self, m: &mut DMatrix<f64>) {
        if self == Activation::Tanh {
            m.apply(|x| *x = x.tanh());
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Width of the evolving state. For the Hamiltonian network this is the
    /// combined width of the `(y, z)` halves and must be even.
    pub channels: usize,
    pub n_features: usize,
    pub m_targets: usize,
    /// Time horizon `T`.
    pub t_end: f64,
    /// Number of layers of the discrete architectures.
    pub n_steps: usize,
    pub basis: BasisKind,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub alpha: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.n_features == 0 || self.m_targets == 0 {
            return fail("channels, n_features and m_targets must be positive".into());
        }
        if self.n_steps == 0 {
            return fail("n_steps must be positive".into());
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return fail(format!("time horizon must be positive, got {}", self.t_end));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.arch == Arch::Hamiltonian && !self.channels.is_multiple_of(2) {
            return fail(format!(
                "hamiltonian network splits the state into two halves; channels = {} is odd",
                self.channels
            ));
        }
        if self.arch == Arch::NeuralOde && !self.basis.is_polynomial() {
            return Err(Error::Unsupported(
                "the neural ODE needs weights at arbitrary times; basis `none` is not supported \
                 (use degree 0 for constant weights)"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Width of the per-layer map, i.e. the rows of `K`.
    pub fn layer_width(&self) -> usize {
        match self.arch {
            Arch::Hamiltonian => self.channels / 2,
            _ => self.channels,
        }
    }

    /// Length of one flattened layer parameter vector: `w (w + 1) + w`.
    pub fn n_layerparams(&self) -> usize {
        let w = self.layer_width();
        w * (w + 1) + w
    }

    /// Columns of `Theta`: `d` for polynomial bases, `n_steps` otherwise.
    pub fn theta_columns(&self) -> usize {
        self.basis.n_functions().unwrap_or(self.n_steps)
    }

    /// Nodes where the discrete architectures read their layer weights.
    pub fn weight_grid(&self) -> Result<TimeGrid> {
        TimeGrid::step_nodes(0.0, self.t_end, self.n_steps)
    }

    pub fn n_open_params(&self) -> usize {
        let w = self.layer_width();
        w * self.n_features + w
    }

    pub fn n_close_params(&self) -> usize {
        self.m_targets * self.channels + self.m_targets
    }

    pub fn n_trainable(&self) -> usize {
        self.n_layerparams() * self.theta_columns() + self.n_open_params() + self.n_close_params()
    }
}

/// Weights of one residual layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `w x (w + 1)`; the last column multiplies the time feature.
    pub k: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LayerParams {
    pub fn zeros(width: usize) -> Self {
        Self {
            k: DMatrix::zeros(width, width + 1),
            b: DVector::zeros(width),
        }
    }

    pub fn width(&self) -> usize {
        self.b.len()
    }

    pub fn from_flat(v: &[f64], width: usize) -> Self {
        assert_eq!(v.len(), width * (width + 1) + width, "flat layer length");
        let split = width * (width + 1);
        Self {
            k: DMatrix::from_row_slice(width, width + 1, &v[..split]),
            b: DVector::from_column_slice(&v[split..]),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let w = self.width();
        let mut v = Vec::with_capacity(w * (w + 2));
        for r in 0..w {
            v.extend(self.k.row(r).iter());
        }
        v.extend(self.b.iter());
        v
    }

    /// Pre-activation `K_u x + k_t s + b` for a state block `x`, where `K_u`
    /// is either the state block of `K` or its transpose.
    fn preactivation(&self, x: &DMatrix<f64>, s: f64, transpose: bool) -> DMatrix<f64> {
        let w = self.width();
        assert_eq!(x.nrows(), w, "state has {} rows, layer expects {w}", x.nrows());
        let ku = self.k.columns(0, w);
        let mut z = if transpose { ku.transpose() * x } else { ku * x };
        let shift = self.k.column(w) * s + &self.b;
        for mut col in z.column_iter_mut() {
            col += &shift;
        }
        z
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpeningLayer {
    pub k_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosingLayer {
    pub w_out: DMatrix<f64>,
    pub b_out: DVector<f64>,
}

/// Coefficient matrix `Theta`: `n_layerparams x d` (or `x n_steps` for the
/// per-step baseline).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamWeights {
    pub theta: DMatrix<f64>,
}

impl ParamWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            theta: DMatrix::zeros(cfg.n_layerparams(), cfg.theta_columns()),
        }
    }

    fn check(&self, basis: BasisKind, grid: &TimeGrid) -> Result<()> {
        let expected = basis.n_functions().unwrap_or(grid.len());
        if self.theta.ncols() != expected {
            return Err(Error::Shape(format!(
                "theta has {} columns, basis {basis} on {} nodes needs {expected}",
                self.theta.ncols(),
                grid.len()
            )));
        }
        Ok(())
    }

    /// Per-node weights `Theta A` (or `Theta` itself for basis `none`).
    pub fn materialize(&self, basis: BasisKind, grid: &TimeGrid) -> Result<DMatrix<f64>> {
        self.check(basis, grid)?;
        if basis.is_polynomial() {
            Ok(&self.theta * build_basis_matrix(basis, grid)?.as_matrix())
        } else {
            Ok(self.theta.clone())
        }
    }
}

/// Thread-safe tally of residual-function evaluations.
#[derive(Debug, Default)]
pub struct EvalCounter(AtomicU64);

impl EvalCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Layer weights at time `t`.
///
/// Polynomial bases evaluate `Theta p(t)` at any `t` in the horizon; the
/// per-step baseline only has weights at grid nodes.
pub fn weights_at(
    theta: &ParamWeights,
    basis: BasisKind,
    grid: &TimeGrid,
    width: usize,
    t: f64,
) -> Result<LayerParams> {
    theta.check(basis, grid)?;
    let v = if basis.is_polynomial() {
        let p = DVector::from_vec(basis.eval_column(grid.normalize(t)));
        &theta.theta * p
    } else {
        let j = grid.node_index(t).ok_or(Error::OffGrid { t })?;
        theta.theta.column(j).into_owned()
    };
    Ok(LayerParams::from_flat(v.as_slice(), width))
}

/// `act(K [u; s] + b)` with `s` the normalized time feature.
pub fn layer_f(u: &StateBatch, s: f64, params: &LayerParams, act: Activation) -> StateBatch {
    let mut z = params.preactivation(u, s, false);
    act.apply_in_place(&mut z);
    z
}

/// `u(0) = act(K_in y + b_in)`.
pub fn open(y: &DMatrix<f64>, layer: &OpeningLayer, act: Activation) -> StateBatch {
    assert_eq!(
        y.nrows(),
        layer.k_in.ncols(),
        "features have {} rows, opening layer expects {}",
        y.nrows(),
        layer.k_in.ncols()
    );
    let mut u = &layer.k_in * y;
    for mut col in u.column_iter_mut() {
        col += &layer.b_in;
    }
    act.apply_in_place(&mut u);
    u
}

/// Affine read-out `W_out u + b_out`.
pub fn close(u: &StateBatch, layer: &ClosingLayer) -> DMatrix<f64> {
    assert_eq!(
        u.nrows(),
        layer.w_out.ncols(),
        "state has {} rows, closing layer expects {}",
        u.nrows(),
        layer.w_out.ncols()
    );
    let mut out = &layer.w_out * u;
    for mut col in out.column_iter_mut() {
        col += &layer.b_out;
    }
    out
}

/// States `u^0 .. u^N` of a forward-Euler sweep.
#[derive(Clone, Debug)]
pub struct ResnetTrajectory {
    pub states: Vec<StateBatch>,
}

impl ResnetTrajectory {
    pub fn last(&self) -> &StateBatch {
        self.states.last().expect("trajectory holds u0")
    }
}

/// `u^{n+1} = u^n + dt f(u^n, t_n, theta(t_n))` over the nodes of `grid`.
pub fn resnet_forward(
    u0: &StateBatch,
    theta: &ParamWeights,
    cfg: &ModelConfig,
    grid: &TimeGrid,
    counter: &EvalCounter,
) -> Result<ResnetTrajectory> {
    let dt = grid
        .uniform_step()
        .ok_or_else(|| Error::InvalidGrid("forward Euler needs equispaced step nodes".into()))?;
    let weights = theta.materialize(cfg.basis, grid)?;
    let w = cfg.layer_width();
    let mut states = Vec::with_capacity(grid.len() + 1);
    states.push(u0.clone());
    for (j, &t) in grid.points().iter().enumerate() {
        let layer = LayerParams::from_flat(weights.column(j).as_slice(), w);
        let s = grid.normalize(t);
        let next = euler_step(states.last().unwrap(), t, dt, |u, _| {
            layer_f(u, s, &layer, cfg.activation)
        });
        states.push(next);
    }
    counter.add(grid.len() as u64);
    Ok(ResnetTrajectory { states })
}

/// States `(y_j, z_j)` for `j = 0..=N` of a Verlet sweep.
#[derive(Clone, Debug)]
pub struct HamiltonianTrajectory {
    pub ys: Vec<StateBatch>,
    pub zs: Vec<StateBatch>,
}

impl HamiltonianTrajectory {
    /// Final state stacked as `[y_N; z_N]`.
    pub fn stacked_last(&self) -> StateBatch {
        stack(self.ys.last().unwrap(), self.zs.last().unwrap())
    }
}

pub(crate) fn stack(y: &StateBatch, z: &StateBatch) -> StateBatch {
    let w = y.nrows();
    let mut out = DMatrix::zeros(2 * w, y.ncols());
    out.rows_mut(0, w).copy_from(y);
    out.rows_mut(w, w).copy_from(z);
    out
}

/// Verlet network with `z_0 = 0`:
///
/// ```text
/// y_{j+1} = y_j + dt act(K_j^T z_j + k_t s_j + b_j)
/// z_{j+1} = z_j - dt act(K_j y_{j+1} + k_t s_j + b_j)
/// ```
pub fn hamiltonian_forward(
    y0: &StateBatch,
    theta: &ParamWeights,
    cfg: &ModelConfig,
    grid: &TimeGrid,
    counter: &EvalCounter,
) -> Result<HamiltonianTrajectory> {
    if !cfg.channels.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "hamiltonian network needs an even channel count, got {}",
            cfg.channels
        )));
    }
    let dt = grid
        .uniform_step()
        .ok_or_else(|| Error::InvalidGrid("Verlet needs equispaced step nodes".into()))?;
    let weights = theta.materialize(cfg.basis, grid)?;
    let w = cfg.layer_width();
    if y0.nrows() != w {
        return Err(Error::Shape(format!(
            "initial y has {} rows, expected half the channels ({w})",
            y0.nrows()
        )));
    }
    let mut ys = Vec::with_capacity(grid.len() + 1);
    let mut zs = Vec::with_capacity(grid.len() + 1);
    ys.push(y0.clone());
    zs.push(DMatrix::zeros(w, y0.ncols()));
    for (j, &t) in grid.points().iter().enumerate() {
        let layer = LayerParams::from_flat(weights.column(j).as_slice(), w);
        let s = grid.normalize(t);
        let (y, z) = verlet_step(
            ys.last().unwrap(),
            zs.last().unwrap(),
            t,
            dt,
            |z, _| hamiltonian_y_rate(z, s, &layer, cfg.activation),
            |y, _| hamiltonian_z_rate(y, s, &layer, cfg.activation),
        );
        ys.push(y);
        zs.push(z);
    }
    counter.add(2 * grid.len() as u64);
    Ok(HamiltonianTrajectory { ys, zs })
}

/// `act(K_u^T z + k_t s + b)`
pub fn hamiltonian_y_rate(z: &StateBatch, s: f64, layer: &LayerParams, act: Activation) -> StateBatch {
    let mut m = layer.preactivation(z, s, true);
    act.apply_in_place(&mut m);
    m
}

/// `act(K_u y + k_t s + b)`
pub fn hamiltonian_z_rate(y: &StateBatch, s: f64, layer: &LayerParams, act: Activation) -> StateBatch {
    layer_f(y, s, layer, act)
}

/// Neural ODE vector field `f(u, t, Theta p(t))`.
pub fn node_rhs(
    u: &StateBatch,
    t: f64,
    theta: &ParamWeights,
    cfg: &ModelConfig,
    grid: &TimeGrid,
    counter: &EvalCounter,
) -> Result<StateBatch> {
    if !cfg.basis.is_polynomial() {
        return Err(Error::Unsupported(
            "neural ODE vector field needs a polynomial basis".into(),
        ));
    }
    let layer = weights_at(theta, cfg.basis, grid, cfg.layer_width(), t)?;
    counter.add(1);
    Ok(layer_f(u, grid.normalize(t), &layer, cfg.activation))
}
