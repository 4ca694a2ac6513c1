//! Loss and gradients.
//!
//! The discrete architectures are differentiated exactly by sweeping their
//! stored trajectories backwards. Per-step weight gradients `G` (one column
//! per layer) are mapped onto basis coefficients with `G A^T`, the transpose
//! of `theta(t_j) = Theta A[:, j]`.
//!
//! The neural ODE uses the continuous adjoint: `a' = -(df/du)^T a`, integrated
//! from `T` down to `0` together with the coefficient gradient
//! `g_i = int a^T (df/dtheta) p_i(t) dt`, so the basis projection happens
//! inside the integrand. The forward state needed along the way is read from
//! the dense output of the forward solve instead of being re-integrated
//! backwards.

use nalgebra::{DMatrix, DVector};

use crate::arch::{
    close, hamiltonian_forward, open, resnet_forward, stack, Activation, Arch, EvalCounter,
    HamiltonianTrajectory, LayerParams, ModelConfig, ParamWeights, ResnetTrajectory, StateBatch,
};
use crate::basis::{build_basis_matrix, BasisMatrix, TimeGrid};
use crate::error::{Error, Result};
use crate::integrators::{dopri5_solve_dense, dopri5_solve_reverse, SolveRecord, StepControl};
use crate::model::{GradBundle, Model, Params, BLOCK_NAMES};

/// `mean_k 1/2 |pred_k - target_k|^2` over the batch columns.
pub fn data_misfit(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    assert_eq!(pred.shape(), target.shape(), "prediction/target shape mismatch");
    if pred.ncols() == 0 {
        return 0.0;
    }
    0.5 * (pred - target).norm_squared() / pred.ncols() as f64
}

/// Data misfit plus `alpha/2 |params|^2`.
pub fn loss(pred: &DMatrix<f64>, target: &DMatrix<f64>, params: &Params, alpha: f64) -> f64 {
    data_misfit(pred, target) + 0.5 * alpha * params.sq_norm()
}

/// Gradient of the data misfit with respect to the predictions.
pub fn misfit_grad(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(pred.shape(), target.shape(), "prediction/target shape mismatch");
    (pred - target) / pred.ncols().max(1) as f64
}

/// Result of a backward sweep through the time-dependent layers.
#[derive(Clone, Debug)]
pub struct StateBackward {
    /// Gradient with respect to `Theta`.
    pub g_theta: DMatrix<f64>,
    /// Gradient with respect to the initial state.
    pub a0: StateBatch,
}

/// Adds the gradient of `sum(delta .* pre)` with `pre = K_u x + k_t s + b`
/// (or `K_u^T x + ...` when `transpose`) to a flattened layer vector.
fn accumulate_layer_grad(
    out: &mut [f64],
    width: usize,
    delta: &DMatrix<f64>,
    x: &DMatrix<f64>,
    s: f64,
    transpose: bool,
) {
    let dk = if transpose {
        x * delta.transpose()
    } else {
        delta * x.transpose()
    };
    let row_sum: DVector<f64> = delta.column_sum();
    let stride = width + 1;
    for r in 0..width {
        for c in 0..width {
            out[r * stride + c] += dk[(r, c)];
        }
        out[r * stride + width] += s * row_sum[r];
        out[width * stride + r] += row_sum[r];
    }
}

fn derivative_weighted(act: Activation, out: &DMatrix<f64>, adj: &DMatrix<f64>) -> DMatrix<f64> {
    out.zip_map(adj, |f, a| a * act.derivative_from_output(f))
}

fn project(g_steps: DMatrix<f64>, basis_matrix: Option<&BasisMatrix>) -> DMatrix<f64> {
    match basis_matrix {
        Some(a) => g_steps * a.as_matrix().transpose(),
        None => g_steps,
    }
}

fn basis_matrix_for(cfg: &ModelConfig, grid: &TimeGrid) -> Result<Option<BasisMatrix>> {
    if cfg.basis.is_polynomial() {
        build_basis_matrix(cfg.basis, grid).map(Some)
    } else {
        Ok(None)
    }
}

/// Reverse sweep through a forward-Euler trajectory.
///
/// `a_final` is the gradient of the loss with respect to `u^N`.
pub fn resnet_backward(
    traj: &ResnetTrajectory,
    theta: &ParamWeights,
    basis_matrix: Option<&BasisMatrix>,
    cfg: &ModelConfig,
    grid: &TimeGrid,
    a_final: &StateBatch,
) -> Result<StateBackward> {
    let n = grid.len();
    if traj.states.len() != n + 1 {
        return Err(Error::Shape(format!(
            "trajectory has {} states, grid implies {}",
            traj.states.len(),
            n + 1
        )));
    }
    if a_final.shape() != traj.last().shape() {
        return Err(Error::Shape("terminal adjoint does not match the state".into()));
    }
    let dt = grid
        .uniform_step()
        .ok_or_else(|| Error::InvalidGrid("forward Euler needs equispaced step nodes".into()))?;
    let weights = theta.materialize(cfg.basis, grid)?;
    let w = cfg.layer_width();
    let mut g_steps = DMatrix::zeros(cfg.n_layerparams(), n);
    let mut a = a_final.clone();
    for j in (0..n).rev() {
        let layer = LayerParams::from_flat(weights.column(j).as_slice(), w);
        let s = grid.normalize(grid.points()[j]);
        let u = &traj.states[j];
        let f = crate::arch::layer_f(u, s, &layer, cfg.activation);
        let delta = derivative_weighted(cfg.activation, &f, &a) * dt;
        let mut g_col = vec![0.0; g_steps.nrows()];
        accumulate_layer_grad(&mut g_col, w, &delta, u, s, false);
        g_steps.column_mut(j).copy_from_slice(&g_col);
        a += layer.k.columns(0, w).transpose() * &delta;
    }
    Ok(StateBackward {
        g_theta: project(g_steps, basis_matrix),
        a0: a,
    })
}

/// Reverse sweep through a Verlet trajectory, mirroring the staggered
/// updates. `a_final` is the gradient with respect to `[y_N; z_N]`; the
/// returned `a0` is the gradient with respect to `y_0` (`z_0` is fixed).
pub fn hamiltonian_backward(
    traj: &HamiltonianTrajectory,
    theta: &ParamWeights,
    basis_matrix: Option<&BasisMatrix>,
    cfg: &ModelConfig,
    grid: &TimeGrid,
    a_final: &StateBatch,
) -> Result<StateBackward> {
    let n = grid.len();
    let w = cfg.layer_width();
    if traj.ys.len() != n + 1 || traj.zs.len() != n + 1 {
        return Err(Error::Shape("trajectory length does not match the grid".into()));
    }
    if a_final.nrows() != 2 * w || a_final.ncols() != traj.ys[0].ncols() {
        return Err(Error::Shape("terminal adjoint does not match [y; z]".into()));
    }
    let dt = grid
        .uniform_step()
        .ok_or_else(|| Error::InvalidGrid("Verlet needs equispaced step nodes".into()))?;
    let weights = theta.materialize(cfg.basis, grid)?;
    let act = cfg.activation;
    let mut g_steps = DMatrix::zeros(cfg.n_layerparams(), n);
    let mut ybar = a_final.rows(0, w).into_owned();
    let mut zbar = a_final.rows(w, w).into_owned();
    for j in (0..n).rev() {
        let layer = LayerParams::from_flat(weights.column(j).as_slice(), w);
        let ku = layer.k.columns(0, w);
        let s = grid.normalize(grid.points()[j]);
        let mut g_col = vec![0.0; g_steps.nrows()];

        // z_{j+1} = z_j - dt act(K_u y_{j+1} + ...)
        let y_next = &traj.ys[j + 1];
        let gz = crate::arch::hamiltonian_z_rate(y_next, s, &layer, act);
        let delta2 = derivative_weighted(act, &gz, &zbar) * (-dt);
        accumulate_layer_grad(&mut g_col, w, &delta2, y_next, s, false);
        ybar += ku.transpose() * &delta2;

        // y_{j+1} = y_j + dt act(K_u^T z_j + ...)
        let z = &traj.zs[j];
        let fy = crate::arch::hamiltonian_y_rate(z, s, &layer, act);
        let delta1 = derivative_weighted(act, &fy, &ybar) * dt;
        accumulate_layer_grad(&mut g_col, w, &delta1, z, s, true);
        zbar += ku * &delta1;
        g_steps.column_mut(j).copy_from_slice(&g_col);
    }
    Ok(StateBackward {
        g_theta: project(g_steps, basis_matrix),
        a0: ybar,
    })
}

/// Vector-Jacobian products of one layer at state `u`: returns
/// `((df/du)^T a, flattened (df/dtheta)^T a)`.
fn layer_vjp(
    u: &StateBatch,
    s: f64,
    layer: &LayerParams,
    act: Activation,
    a: &StateBatch,
) -> (StateBatch, Vec<f64>) {
    let w = layer.width();
    let f = crate::arch::layer_f(u, s, layer, act);
    let delta = derivative_weighted(act, &f, a);
    let mut q = vec![0.0; w * (w + 2)];
    accumulate_layer_grad(&mut q, w, &delta, u, s, false);
    (layer.k.columns(0, w).transpose() * &delta, q)
}

/// Right-hand side of the adjoint equation, `-(df/du)^T a` at `(u, t)`.
pub fn adjoint_rhs(
    a: &StateBatch,
    u: &StateBatch,
    t: f64,
    theta: &ParamWeights,
    cfg: &ModelConfig,
    grid: &TimeGrid,
) -> Result<StateBatch> {
    if a.shape() != u.shape() {
        return Err(Error::Shape("adjoint and state shapes differ".into()));
    }
    let layer = crate::arch::weights_at(theta, cfg.basis, grid, cfg.layer_width(), t)?;
    let (jt_a, _) = layer_vjp(u, grid.normalize(t), &layer, cfg.activation, a);
    Ok(-jt_a)
}

/// Gradient of the opening layer given the adjoint at `u(0)`.
fn opening_grads(
    model: &Model,
    y: &DMatrix<f64>,
    u0: &StateBatch,
    a0: &StateBatch,
    grads: &mut GradBundle,
) {
    let delta = derivative_weighted(model.cfg.activation, u0, a0);
    grads.open.k_in = &delta * y.transpose();
    grads.open.b_in = delta.column_sum();
}

/// Closing-layer gradients and the terminal adjoint `W_out^T dL/dpred`.
fn closing_grads(
    model: &Model,
    u_final: &StateBatch,
    target: &DMatrix<f64>,
    grads: &mut GradBundle,
) -> (f64, StateBatch) {
    let pred = close(u_final, &model.params.close);
    let misfit = data_misfit(&pred, target);
    let dpred = misfit_grad(&pred, target);
    grads.close.w_out = &dpred * u_final.transpose();
    grads.close.b_out = dpred.column_sum();
    let a_final = model.params.close.w_out.transpose() * &dpred;
    (misfit, a_final)
}

fn add_regularization(model: &Model, misfit: f64, grads: &mut GradBundle) -> f64 {
    let alpha = model.cfg.alpha;
    if alpha > 0.0 {
        grads.axpy(alpha, &model.params);
    }
    misfit + 0.5 * alpha * model.params.sq_norm()
}

fn check_batch(model: &Model, y: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<()> {
    if y.nrows() != model.cfg.n_features || c.nrows() != model.cfg.m_targets || y.ncols() != c.ncols() {
        return Err(Error::Shape(format!(
            "batch {:?} -> {:?} does not fit a {} -> {} model",
            y.shape(),
            c.shape(),
            model.cfg.n_features,
            model.cfg.m_targets
        )));
    }
    Ok(())
}

/// Loss and exact gradient of a ResNet or Hamiltonian network.
pub fn discrete_gradient(
    model: &Model,
    y: &DMatrix<f64>,
    c: &DMatrix<f64>,
    counter: &EvalCounter,
) -> Result<(f64, GradBundle)> {
    check_batch(model, y, c)?;
    let cfg = &model.cfg;
    let grid = model.grid();
    let a_mat = basis_matrix_for(cfg, &grid)?;
    let theta = &model.params.theta;
    let u0 = open(y, &model.params.open, cfg.activation);
    let mut grads = Params::zeros(cfg);
    let back = match cfg.arch {
        Arch::ResNet => {
            let traj = resnet_forward(&u0, theta, cfg, &grid, counter)?;
            let (misfit, a_final) = closing_grads(model, traj.last(), c, &mut grads);
            let back = resnet_backward(&traj, theta, a_mat.as_ref(), cfg, &grid, &a_final)?;
            (misfit, back)
        }
        Arch::Hamiltonian => {
            let traj = hamiltonian_forward(&u0, theta, cfg, &grid, counter)?;
            let last = stack(traj.ys.last().unwrap(), traj.zs.last().unwrap());
            let (misfit, a_final) = closing_grads(model, &last, c, &mut grads);
            let back = hamiltonian_backward(&traj, theta, a_mat.as_ref(), cfg, &grid, &a_final)?;
            (misfit, back)
        }
        Arch::NeuralOde => {
            return Err(Error::Unsupported(
                "neural ODE gradients use the continuous adjoint".into(),
            ))
        }
    };
    let (misfit, back) = back;
    grads.theta.theta = back.g_theta;
    opening_grads(model, y, &u0, &back.a0, &mut grads);
    let total = add_regularization(model, misfit, &mut grads);
    Ok((total, grads))
}

/// Output of [`node_gradient`].
#[derive(Clone, Debug)]
pub struct NodeGradient {
    pub loss: f64,
    pub grads: GradBundle,
    pub forward: SolveRecord,
    pub backward: SolveRecord,
}

/// Loss and adjoint gradient of a neural ODE.
///
/// Both the forward and the augmented backward solve count one evaluation per
/// right-hand-side call on `counter`.
pub fn node_gradient(
    model: &Model,
    y: &DMatrix<f64>,
    c: &DMatrix<f64>,
    ctrl: &StepControl,
    counter: &EvalCounter,
) -> Result<NodeGradient> {
    check_batch(model, y, c)?;
    let cfg = &model.cfg;
    if cfg.arch != Arch::NeuralOde {
        return Err(Error::Unsupported("node_gradient needs a neural ODE".into()));
    }
    let basis = cfg.basis;
    let d = basis
        .n_functions()
        .ok_or_else(|| Error::Unsupported("neural ODE needs a polynomial basis".into()))?;
    let grid = model.grid();
    let theta = &model.params.theta.theta;
    let w = cfg.layer_width();
    let act = cfg.activation;
    let n_lp = cfg.n_layerparams();

    let u0 = open(y, &model.params.open, act);
    let (rows, cols) = u0.shape();
    let layer_at = |t: f64| -> (LayerParams, f64, Vec<f64>) {
        let s = grid.normalize(t);
        let p = basis.eval_column(s);
        let v = theta * DVector::from_column_slice(&p);
        (LayerParams::from_flat(v.as_slice(), w), s, p)
    };

    let (forward, dense) = dopri5_solve_dense(
        |t, state, out| {
            counter.add(1);
            let (layer, s, _) = layer_at(t);
            let u = DMatrix::from_column_slice(rows, cols, state);
            let f = crate::arch::layer_f(&u, s, &layer, act);
            out.copy_from_slice(f.as_slice());
        },
        u0.as_slice(),
        (0.0, cfg.t_end),
        ctrl,
    )?;
    let u_final = DMatrix::from_column_slice(rows, cols, forward.final_state());

    let mut grads = Params::zeros(cfg);
    let (misfit, a_final) = closing_grads(model, &u_final, c, &mut grads);

    let n_state = rows * cols;
    let mut aug0 = vec![0.0; n_state + n_lp * d];
    aug0[..n_state].copy_from_slice(a_final.as_slice());
    let mut u_buf = vec![0.0; n_state];
    let backward = dopri5_solve_reverse(
        |t, state, out| {
            counter.add(1);
            dense.eval_into(t, &mut u_buf);
            let u = DMatrix::from_column_slice(rows, cols, &u_buf);
            let a = DMatrix::from_column_slice(rows, cols, &state[..n_state]);
            let (layer, s, p) = layer_at(t);
            let (jt_a, q) = layer_vjp(&u, s, &layer, act, &a);
            for (o, v) in out[..n_state].iter_mut().zip(jt_a.iter()) {
                *o = -v;
            }
            let g_out = &mut out[n_state..];
            for (k, pk) in p.iter().enumerate() {
                for (i, qi) in q.iter().enumerate() {
                    g_out[k * n_lp + i] = -qi * pk;
                }
            }
        },
        &aug0,
        (cfg.t_end, 0.0),
        ctrl,
    )?;
    let end = backward.final_state();
    let a0 = DMatrix::from_column_slice(rows, cols, &end[..n_state]);
    grads.theta.theta = DMatrix::from_column_slice(n_lp, d, &end[n_state..]);
    opening_grads(model, y, &u0, &a0, &mut grads);
    let total = add_regularization(model, misfit, &mut grads);
    Ok(NodeGradient {
        loss: total,
        grads,
        forward,
        backward,
    })
}

/// Loss and gradient for any architecture.
pub fn model_gradient(
    model: &Model,
    y: &DMatrix<f64>,
    c: &DMatrix<f64>,
    ctrl: &StepControl,
    counter: &EvalCounter,
) -> Result<(f64, GradBundle)> {
    match model.cfg.arch {
        Arch::NeuralOde => node_gradient(model, y, c, ctrl, counter).map(|g| (g.loss, g.grads)),
        _ => discrete_gradient(model, y, c, counter),
    }
}

/// Full objective (misfit plus regularization) of `model` on a batch.
pub fn model_loss(
    model: &Model,
    y: &DMatrix<f64>,
    c: &DMatrix<f64>,
    ctrl: &StepControl,
) -> Result<f64> {
    check_batch(model, y, c)?;
    let pred = model.predict(y, &EvalCounter::new(), ctrl)?;
    Ok(loss(&pred, c, &model.params, model.cfg.alpha))
}

/// Central differences of `f` at `x`, with step `h * max(1, |x_i|)` per
/// coordinate.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * x[i].abs().max(1.0);
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// [`finite_diff_gradient`] over every block of a parameter set.
pub fn finite_diff_params<F>(mut loss_fn: F, params: &Params, h: f64) -> GradBundle
where
    F: FnMut(&Params) -> f64,
{
    let mut probe = params.clone();
    let flat = finite_diff_gradient(
        |x| {
            probe.assign_flat(x);
            loss_fn(&probe)
        },
        &params.to_flat(),
        h,
    );
    let mut out = params.clone();
    out.assign_flat(&flat);
    out
}

/// `max_i |a_i - b_i| / max(|a|_inf, |b|_inf)`, zero when both vanish.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared vectors differ in length");
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockError {
    pub name: &'static str,
    pub max_rel_error: f64,
}

/// Per-block [`max_rel_error`] between two gradient bundles.
pub fn block_errors(analytic: &GradBundle, reference: &GradBundle) -> Vec<BlockError> {
    BLOCK_NAMES
        .iter()
        .zip(analytic.blocks().iter().zip(reference.blocks()))
        .map(|(&name, (a, b))| BlockError {
            name,
            max_rel_error: max_rel_error(a, b),
        })
        .collect()
}
