use contnet::arch::{
    hamiltonian_forward, hamiltonian_y_rate, hamiltonian_z_rate, layer_f, node_rhs, open,
    resnet_forward, weights_at, Activation, Arch, EvalCounter, LayerParams, ModelConfig,
    ParamWeights,
};
use contnet::basis::{build_basis_matrix, BasisKind};
use contnet::integrators::{dopri5_solve, dopri5_solve_reverse, verlet_step_inverse, StepControl};
use contnet::model::{Model, Params};
use contnet::optim::init_params;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn cfg(arch: Arch, channels: usize, steps: usize, basis: BasisKind) -> ModelConfig {
    ModelConfig {
        arch,
        channels,
        n_features: 3,
        m_targets: 2,
        t_end: 1.0,
        n_steps: steps,
        basis,
        activation: Activation::Tanh,
        alpha: 0.0,
    }
}

fn random_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, std).unwrap();
    DMatrix::from_fn(rows, cols, |_, _| n.sample(&mut rng))
}

/// Shifted Legendre values by the three-term recurrence in `x = 2s - 1`.
fn shifted_legendre(d: usize, s: f64) -> Vec<f64> {
    let x = 2.0 * s - 1.0;
    let mut p = vec![1.0, x];
    for n in 1..d {
        let next = ((2 * n + 1) as f64 * x * p[n] - n as f64 * p[n - 1]) / (n + 1) as f64;
        p.push(next);
    }
    p.truncate(d + 1);
    p
}

#[test]
fn resnet_matches_reference_euler_loop() {
    let c = cfg(Arch::ResNet, 2, 12, BasisKind::legendre(3));
    let mut params = init_params(&c, 0);
    params.theta.theta += random_matrix(c.n_layerparams(), 4, 0.3, 1);
    let y = DMatrix::from_row_slice(3, 2, &[0.2, -0.7, 1.0, 0.4, -0.3, 0.9]);
    let u0 = open(&y, &params.open, c.activation);
    let grid = c.weight_grid().unwrap();
    let out = resnet_forward(&u0, &params.theta, &c, &grid, &EvalCounter::new()).unwrap();

    let dt = 1.0 / 12.0;
    let mut u = u0.clone();
    for j in 0..12 {
        let s = j as f64 * dt;
        let p = shifted_legendre(3, s);
        let flat: Vec<f64> = (0..c.n_layerparams())
            .map(|r| (0..4).map(|i| params.theta.theta[(r, i)] * p[i]).sum())
            .collect();
        // flat layout: K (2 x 3) row-major, then b (2)
        let mut next = u.clone();
        for col in 0..u.ncols() {
            for r in 0..2 {
                let pre = flat[3 * r] * u[(0, col)] + flat[3 * r + 1] * u[(1, col)] + flat[3 * r + 2] * s + flat[6 + r];
                next[(r, col)] = u[(r, col)] + dt * pre.tanh();
            }
        }
        u = next;
    }
    assert!((out.last() - u).amax() < 1e-12);
}

#[test]
fn hamiltonian_inverse_sweep_recovers_initial_state() {
    let c = cfg(Arch::Hamiltonian, 8, 40, BasisKind::legendre(3));
    let mut params = init_params(&c, 0);
    params.theta.theta += random_matrix(c.n_layerparams(), 4, 0.5, 2);
    let y = random_matrix(3, 5, 1.0, 3);
    let y0 = open(&y, &params.open, c.activation);
    let grid = c.weight_grid().unwrap();
    let tr = hamiltonian_forward(&y0, &params.theta, &c, &grid, &EvalCounter::new()).unwrap();
    let dt = grid.uniform_step().unwrap();
    let weights = params.theta.materialize(c.basis, &grid).unwrap();
    let (mut yy, mut zz) = (tr.ys.last().unwrap().clone(), tr.zs.last().unwrap().clone());
    for (j, &t) in grid.points().iter().enumerate().rev() {
        let layer = LayerParams::from_flat(weights.column(j).as_slice(), 4);
        let s = grid.normalize(t);
        (yy, zz) = verlet_step_inverse(
            &yy,
            &zz,
            t,
            dt,
            |z, _| hamiltonian_y_rate(z, s, &layer, c.activation),
            |y, _| hamiltonian_z_rate(y, s, &layer, c.activation),
        );
    }
    assert!((yy - &y0).amax() < 1e-10);
    assert!(zz.amax() < 1e-10);
}

#[test]
fn node_field_reproduces_fitted_step_weights() {
    let c = cfg(Arch::NeuralOde, 4, 12, BasisKind::legendre(3));
    let grid = c.weight_grid().unwrap();
    let a = build_basis_matrix(c.basis, &grid).unwrap().0;
    let truth = random_matrix(c.n_layerparams(), 4, 0.4, 5);
    let per_step = &truth * &a;
    // least squares: Theta A = W  =>  A^T Theta^T = W^T
    let fit = a
        .transpose()
        .svd(true, true)
        .solve(&per_step.transpose(), 1e-14)
        .unwrap()
        .transpose();
    let theta = ParamWeights { theta: fit };
    let u = random_matrix(4, 3, 1.0, 6);
    for (j, &t) in grid.points().iter().enumerate() {
        let layer = LayerParams::from_flat(per_step.column(j).as_slice(), 4);
        let want = layer_f(&u, grid.normalize(t), &layer, c.activation);
        let got = node_rhs(&u, t, &theta, &c, &grid, &EvalCounter::new()).unwrap();
        assert!((got - want).amax() < 1e-12);
    }
}

#[test]
fn node_field_is_autonomous_for_degree_zero() {
    let mut c = cfg(Arch::NeuralOde, 4, 12, BasisKind::legendre(0));
    c.t_end = 2.0;
    let grid = c.weight_grid().unwrap();
    let theta = ParamWeights { theta: random_matrix(c.n_layerparams(), 1, 0.4, 8) };
    let u = random_matrix(4, 2, 1.0, 9);
    let layer = weights_at(&theta, c.basis, &grid, 4, 0.1).unwrap();
    assert_eq!(layer, weights_at(&theta, c.basis, &grid, 4, 1.9).unwrap());
    let counter = EvalCounter::new();
    node_rhs(&u, 0.1, &theta, &c, &grid, &counter).unwrap();
    node_rhs(&u, 0.9, &theta, &c, &grid, &counter).unwrap();
    assert_eq!(counter.get(), 2);
}

#[test]
fn node_round_trip_through_reverse_solve() {
    let c = cfg(Arch::NeuralOde, 4, 12, BasisKind::legendre(3));
    let params = init_params(&c, 0);
    let grid = c.weight_grid().unwrap();
    let y = random_matrix(3, 2, 1.0, 0);
    let u0 = open(&y, &params.open, c.activation);
    let field = |t: f64, v: &[f64], out: &mut [f64]| {
        let u = DMatrix::from_column_slice(4, 2, v);
        let f = node_rhs(&u, t, &params.theta, &c, &grid, &EvalCounter::new()).unwrap();
        out.copy_from_slice(f.as_slice());
    };
    let ctrl = StepControl::with_tolerances(1e-8, 1e-10);
    let fwd = dopri5_solve(field, u0.as_slice(), (0.0, 1.0), &ctrl, &[]).unwrap();
    let back = dopri5_solve_reverse(field, fwd.final_state(), (1.0, 0.0), &ctrl).unwrap();
    let err = DMatrix::from_column_slice(4, 2, back.final_state()) - &u0;
    assert!(err.norm() / u0.norm() < 1e-5);
}

#[test]
fn eval_counters_follow_step_counts() {
    for (arch, per_step) in [(Arch::ResNet, 1), (Arch::Hamiltonian, 2)] {
        for steps in [1, 5, 12] {
            let c = cfg(arch, 4, steps, BasisKind::monomial(2));
            let params = init_params(&c, 0);
            let grid = c.weight_grid().unwrap();
            let counter = EvalCounter::new();
            let u0 = DMatrix::from_element(c.layer_width(), 3, 0.1);
            match arch {
                Arch::ResNet => {
                    resnet_forward(&u0, &params.theta, &c, &grid, &counter).unwrap();
                }
                _ => {
                    hamiltonian_forward(&u0, &params.theta, &c, &grid, &counter).unwrap();
                }
            }
            assert_eq!(counter.get(), (per_step * steps) as u64);
        }
    }
}

#[test]
fn parameter_count_grows_by_one_layer_per_degree() {
    let base = |basis| ModelConfig {
        n_features: 15,
        m_targets: 10,
        ..cfg(Arch::ResNet, 15, 12, basis)
    };
    let counts: Vec<usize> = (3..=6).map(|d| base(BasisKind::legendre(d)).n_trainable()).collect();
    let layer = base(BasisKind::legendre(3)).n_layerparams();
    assert_eq!(layer, 15 * 16 + 15);
    assert!(counts.windows(2).all(|w| w[1] - w[0] == layer));
    assert_eq!(
        base(BasisKind::none()).n_trainable() - counts[0],
        (12 - 4) * layer
    );
    assert_eq!(
        base(BasisKind::monomial(3)).n_trainable(),
        base(BasisKind::legendre(3)).n_trainable()
    );
}

#[test]
fn checkpoint_file_round_trip() {
    let c = cfg(Arch::Hamiltonian, 6, 5, BasisKind::legendre(2));
    let model = Model::new(c.clone(), init_params(&c, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    assert_eq!(Model::load(&path).unwrap(), model);
}

proptest! {
    #[test]
    fn full_degree_basis_reproduces_unparameterized_resnet(
        steps in 2usize..9,
        seed in 0u64..1000,
        hamiltonian in any::<bool>(),
    ) {
        let arch = if hamiltonian { Arch::Hamiltonian } else { Arch::ResNet };
        let none = cfg(arch, 4, steps, BasisKind::none());
        let leg = cfg(arch, 4, steps, BasisKind::legendre(steps - 1));
        let grid = none.weight_grid().unwrap();
        let w = random_matrix(none.n_layerparams(), steps, 0.5, seed);
        let a = build_basis_matrix(leg.basis, &grid).unwrap().0;
        let theta = a.transpose().lu().solve(&w.transpose()).unwrap().transpose();
        let p_none = ParamWeights { theta: w };
        let p_leg = ParamWeights { theta };
        let u0 = random_matrix(none.layer_width(), 3, 1.0, seed + 1);
        let counter = EvalCounter::new();
        let diff = if hamiltonian {
            let x = hamiltonian_forward(&u0, &p_none, &none, &grid, &counter).unwrap().stacked_last();
            let y = hamiltonian_forward(&u0, &p_leg, &leg, &grid, &counter).unwrap().stacked_last();
            (x - y).amax()
        } else {
            let x = resnet_forward(&u0, &p_none, &none, &grid, &counter).unwrap();
            let y = resnet_forward(&u0, &p_leg, &leg, &grid, &counter).unwrap();
            (x.last() - y.last()).amax()
        };
        prop_assert!(diff < 1e-10, "difference {diff:e}");
    }

    #[test]
    fn checkpoint_text_round_trip_is_exact(seed in any::<u64>(), degree in 0usize..4, hamiltonian in any::<bool>()) {
        let arch = if hamiltonian { Arch::Hamiltonian } else { Arch::ResNet };
        let c = cfg(arch, 4, 6, BasisKind::monomial(degree));
        let mut p = Params::zeros(&c);
        let n = p.len();
        p.assign_flat(random_matrix(n, 1, 1e3, seed).as_slice());
        let model = Model::new(c, p).unwrap();
        let back = Model::from_checkpoint_str(&model.to_checkpoint_string()).unwrap();
        prop_assert_eq!(back, model);
    }
}
