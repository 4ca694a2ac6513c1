use contnet::integrators::{
    dopri5_solve, dopri5_solve_dense, dopri5_solve_reverse, euler_step, verlet_step,
    verlet_step_inverse, StepControl,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn euler_error(n: usize) -> f64 {
    let h = 1.0 / n as f64;
    let mut u = DMatrix::from_element(1, 1, 1.0);
    for j in 0..n {
        u = euler_step(&u, j as f64 * h, h, |x, _| x.clone());
    }
    (u[(0, 0)] - std::f64::consts::E).abs()
}

#[test]
fn euler_is_first_order() {
    let errs: Vec<f64> = [50, 100, 200, 400, 800].iter().map(|&n| euler_error(n)).collect();
    for w in errs.windows(2) {
        let slope = (w[0] / w[1]).log2();
        assert!((slope - 1.0).abs() < 0.1, "slope {slope}");
    }
}

fn dopri_error(tol: f64) -> f64 {
    let rec = dopri5_solve(
        |_, y, out| out[0] = y[0],
        &[1.0],
        (0.0, 1.0),
        &StepControl::with_tolerances(tol, tol),
        &[],
    )
    .unwrap();
    (rec.final_state()[0] - std::f64::consts::E).abs()
}

fn log_log_slope(tols: &[f64]) -> f64 {
    let xs: Vec<f64> = tols.iter().map(|t| t.log10()).collect();
    let ys: Vec<f64> = tols.iter().map(|&t| dopri_error(t).log10()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>()
}

#[test]
fn dopri5_error_tracks_tolerance() {
    // loose tolerances finish in 3-4 steps, below the asymptotic regime
    let slope = log_log_slope(&[1e-6, 1e-7, 1e-8, 1e-9, 1e-10, 1e-11, 1e-12]);
    assert!((0.9..=1.1).contains(&slope), "log-log slope {slope}");
    let mut prev = f64::INFINITY;
    for tol in [1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9, 1e-10] {
        let err = dopri_error(tol);
        assert!(err < tol && err < prev, "tol {tol:e}: error {err:e}");
        prev = err;
    }
    assert!(dopri_error(1e-8) < 1e-6);
}

#[test]
fn dense_output_requests_match_interpolant() {
    let times = [0.1, 0.35, 0.5, 0.9];
    let ctrl = StepControl::with_tolerances(1e-9, 1e-11);
    let rec = dopri5_solve(|t, _, out| out[0] = t.cos(), &[0.0], (0.0, 1.0), &ctrl, &times).unwrap();
    let (_, dense) = dopri5_solve_dense(|t, _, out| out[0] = t.cos(), &[0.0], (0.0, 1.0), &ctrl).unwrap();
    for ((t, v), want) in rec.dense.iter().zip(times) {
        assert_eq!(*t, want);
        assert!((v[0] - t.sin()).abs() < 1e-8);
        assert!((dense.eval(*t)[0] - t.sin()).abs() < 1e-8);
    }
}

#[test]
fn system_solve_matches_matrix_exponential() {
    // rotation: u' = [[0, 1], [-1, 0]] u
    let ctrl = StepControl::with_tolerances(1e-10, 1e-12);
    let rec = dopri5_solve(
        |_, y, out| {
            out[0] = y[1];
            out[1] = -y[0];
        },
        &[1.0, 0.0],
        (0.0, 2.0),
        &ctrl,
        &[],
    )
    .unwrap();
    let y = rec.final_state();
    assert!((y[0] - 2.0f64.cos()).abs() < 1e-8);
    assert!((y[1] + 2.0f64.sin()).abs() < 1e-8);
    let back = dopri5_solve_reverse(
        |_, y, out| {
            out[0] = y[1];
            out[1] = -y[0];
        },
        y,
        (2.0, 0.0),
        &ctrl,
    )
    .unwrap();
    assert!((back.final_state()[0] - 1.0).abs() < 1e-8);
    assert!(back.final_state()[1].abs() < 1e-8);
}

#[test]
fn reverse_requires_decreasing_span() {
    let r = dopri5_solve_reverse(|_, _, o| o[0] = 0.0, &[1.0], (0.0, 1.0), &StepControl::default());
    assert!(r.is_err());
}

#[test]
fn step_control_round_trips_through_json() {
    let c = StepControl::default();
    let text = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<StepControl>(&text).unwrap(), c);
    let partial: StepControl = serde_json::from_str(r#"{"rtol": 1e-9}"#).unwrap();
    assert_eq!(partial.rtol, 1e-9);
    assert!(serde_json::from_str::<StepControl>(r#"{"rtoll": 1e-9}"#).is_err());
}

#[test]
fn verlet_oscillator_has_no_energy_drift() {
    let h = 0.1;
    let mut y = DMatrix::from_element(1, 1, 1.0);
    let mut z = DMatrix::from_element(1, 1, 0.3);
    let modified = |y: f64, z: f64| y * y + z * z + h * y * z;
    let q0 = modified(y[(0, 0)], z[(0, 0)]);
    let mut energy = Vec::new();
    for j in 0..1000 {
        (y, z) = verlet_step(&y, &z, j as f64 * h, h, |z, _| z.clone(), |y, _| y.clone());
        energy.push(y[(0, 0)].powi(2) + z[(0, 0)].powi(2));
    }
    assert!((modified(y[(0, 0)], z[(0, 0)]) - q0).abs() < 1e-12);
    let envelope = |e: &[f64]| e.iter().cloned().fold(0.0, f64::max);
    let (first, last) = (envelope(&energy[..100]), envelope(&energy[900..]));
    assert!((last - first).abs() / first < 1e-3);
}

#[test]
fn verlet_step_and_inverse_are_symmetric() {
    let k = DMatrix::from_row_slice(2, 2, &[0.3, -1.2, 0.7, 0.4]);
    let kt = k.transpose();
    let y0 = DMatrix::from_row_slice(2, 2, &[0.5, -0.1, 1.5, 0.2]);
    let z0 = DMatrix::from_row_slice(2, 2, &[-0.4, 0.9, 0.0, 0.3]);
    let (y1, z1) = verlet_step(&y0, &z0, 0.2, 0.1, tanh_layer(&kt, 0.1), tanh_layer(&k, 0.0));
    let (y, z) = verlet_step_inverse(&y1, &z1, 0.2, 0.1, tanh_layer(&kt, 0.1), tanh_layer(&k, 0.0));
    assert!((y - y0).amax() < 1e-12 && (z - z0).amax() < 1e-12);
}

fn tanh_layer(k: &DMatrix<f64>, b: f64) -> impl Fn(&DMatrix<f64>, f64) -> DMatrix<f64> + '_ {
    move |x, _| (k * x).add_scalar(b).map(f64::tanh)
}

proptest! {
    #[test]
    fn verlet_inverse_recovers_state(
        seed in proptest::collection::vec(-1.0f64..1.0, 4 * 4 + 2 * 4 * 3),
        h in 0.01f64..0.5,
        steps in 1usize..100,
    ) {
        let k = DMatrix::from_column_slice(4, 4, &seed[..16]);
        let y0 = DMatrix::from_column_slice(4, 3, &seed[16..28]);
        let z0 = DMatrix::from_column_slice(4, 3, &seed[28..40]);
        let kt = k.transpose();
        let (mut y, mut z) = (y0.clone(), z0.clone());
        for j in 0..steps {
            (y, z) = verlet_step(&y, &z, j as f64 * h, h, tanh_layer(&kt, 0.1), tanh_layer(&k, -0.2));
        }
        for j in (0..steps).rev() {
            (y, z) = verlet_step_inverse(&y, &z, j as f64 * h, h, tanh_layer(&kt, 0.1), tanh_layer(&k, -0.2));
        }
        let scale = y0.norm().max(z0.norm()).max(1e-300);
        prop_assert!((y - y0).norm() / scale < 1e-9);
        prop_assert!((z - z0).norm() / scale < 1e-9);
    }

    #[test]
    fn eval_count_accounts_for_every_stage(lambda in -3.0f64..3.0, rtol_exp in 3i32..10) {
        let tol = 10f64.powi(-rtol_exp);
        let rec = dopri5_solve(
            |_, y, out| out[0] = lambda * y[0],
            &[1.0],
            (0.0, 1.0),
            &StepControl { h_init: Some(0.01), ..StepControl::with_tolerances(tol, tol) },
            &[],
        ).unwrap();
        prop_assert_eq!(rec.n_rhs_evals, 1 + 6 * (rec.n_accepted + rec.n_rejected));
        prop_assert_eq!(rec.times.len(), rec.n_accepted + 1);
        prop_assert!(rec.times.windows(2).all(|w| w[1] > w[0]));
    }
}

