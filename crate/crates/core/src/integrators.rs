//! Time-stepping engines.
//!
//! Fixed-step forward Euler and staggered Verlet steps operate on batch
//! matrices and back the discrete architectures. The adaptive Dormand-Prince
//! 5(4) solver works on flat state vectors; it drives the neural ODE forward
//! pass and, integrated backwards in time, the adjoint pass.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One explicit Euler update `state + h * rhs(state, t)`.
pub fn euler_step<F>(state: &DMatrix<f64>, t: f64, h: f64, mut rhs: F) -> DMatrix<f64>
where
    F: FnMut(&DMatrix<f64>, f64) -> DMatrix<f64>,
{
    let k = rhs(state, t);
    assert_eq!(k.shape(), state.shape(), "rhs changed the state shape");
    state + k * h
}

/// One staggered Verlet update:
/// `y' = y + h * rhs_y(z, t)`, then `z' = z - h * rhs_z(y', t)`.
///
/// Negative `h` is allowed; it is what the inverse sweep uses.
pub fn verlet_step<Fy, Fz>(
    y: &DMatrix<f64>,
    z: &DMatrix<f64>,
    t: f64,
    h: f64,
    mut rhs_y: Fy,
    mut rhs_z: Fz,
) -> (DMatrix<f64>, DMatrix<f64>)
where
    Fy: FnMut(&DMatrix<f64>, f64) -> DMatrix<f64>,
    Fz: FnMut(&DMatrix<f64>, f64) -> DMatrix<f64>,
{
    let fy = rhs_y(z, t);
    assert_eq!(fy.shape(), y.shape(), "rhs_y shape mismatch");
    let y_next = y + fy * h;
    let fz = rhs_z(&y_next, t);
    assert_eq!(fz.shape(), z.shape(), "rhs_z shape mismatch");
    let z_next = z - fz * h;
    (y_next, z_next)
}

/// Exact inverse of [`verlet_step`] with the same `h`:
/// `z = z' + h * rhs_z(y', t)`, then `y = y' - h * rhs_y(z, t)`.
pub fn verlet_step_inverse<Fy, Fz>(
    y_next: &DMatrix<f64>,
    z_next: &DMatrix<f64>,
    t: f64,
    h: f64,
    mut rhs_y: Fy,
    mut rhs_z: Fz,
) -> (DMatrix<f64>, DMatrix<f64>)
where
    Fy: FnMut(&DMatrix<f64>, f64) -> DMatrix<f64>,
    Fz: FnMut(&DMatrix<f64>, f64) -> DMatrix<f64>,
{
    let z = z_next + rhs_z(y_next, t) * h;
    let y = y_next - rhs_y(&z, t) * h;
    (y, z)
}

/// Step-size controller settings for [`dopri5_solve`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepControl {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step magnitude; `None` selects it from the initial derivative.
    pub h_init: Option<f64>,
    pub h_min: f64,
    /// Largest step magnitude; `None` leaves steps unbounded.
    pub h_max: Option<f64>,
    pub max_steps: usize,
    pub safety: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-8,
            h_init: None,
            h_min: 1e-14,
            h_max: None,
            max_steps: 100_000,
            safety: 0.9,
        }
    }
}

impl StepControl {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }

    /// Tolerances used for gradient verification.
    pub fn tight() -> Self {
        Self::with_tolerances(1e-10, 1e-12)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rtol > 0.0
            && self.atol > 0.0
            && self.h_min > 0.0
            && self.h_max.is_none_or(|h| h > 0.0 && self.h_min <= h)
            && self.max_steps > 0
            && self.safety > 0.0
            && self.safety <= 1.0
            && self.h_init.is_none_or(|h| h > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid step control {self:?}")))
        }
    }
}

/// Outcome of an adaptive solve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveRecord {
    /// Accepted step times, starting with the initial time.
    pub times: Vec<f64>,
    /// State snapshots at `times`.
    pub states: Vec<Vec<f64>>,
    /// Interpolated states at the requested dense-output times.
    pub dense: Vec<(f64, Vec<f64>)>,
    pub n_rhs_evals: usize,
    pub n_accepted: usize,
    pub n_rejected: usize,
}

impl SolveRecord {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("solve record holds the initial state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("solve record holds the initial time")
    }
}

/// Continuous extension of an accepted step.
#[derive(Clone, Debug, PartialEq)]
struct DenseSegment {
    t_start: f64,
    h: f64,
    coeffs: [Vec<f64>; 5],
}

impl DenseSegment {
    fn eval_into(&self, t: f64, out: &mut [f64]) {
        let theta = (t - self.t_start) / self.h;
        let theta1 = 1.0 - theta;
        let [c0, c1, c2, c3, c4] = &self.coeffs;
        for (i, o) in out.iter_mut().enumerate() {
            *o = c0[i] + theta * (c1[i] + theta1 * (c2[i] + theta * (c3[i] + theta1 * c4[i])));
        }
    }

    fn t_end(&self) -> f64 {
        self.t_start + self.h
    }
}

/// Piecewise 4th-order interpolant over a whole solve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenseOutput {
    segments: Vec<DenseSegment>,
}

impl DenseOutput {
    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    /// Interval covered, as `(start, end)` in integration direction.
    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.segments.first()?.t_start, self.segments.last()?.t_end()))
    }

    /// Interpolated state at `t`; times outside the span clamp to the nearest
    /// segment's polynomial.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        assert!(!self.segments.is_empty(), "empty dense output");
        let forward = self.segments[0].h > 0.0;
        let idx = if forward {
            self.segments.partition_point(|s| s.t_end() < t)
        } else {
            self.segments.partition_point(|s| s.t_end() > t)
        };
        self.segments[idx.min(self.segments.len() - 1)].eval_into(t, out);
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.segments[0].coeffs[0].len()];
        self.eval_into(t, &mut out);
        out
    }
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    // 5th-order weights; the 7th stage is evaluated at the new point (FSAL)
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

// difference between the 5th- and 4th-order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

fn error_norm(err: &[f64], y: &[f64], y_new: &[f64], ctrl: &StepControl) -> f64 {
    if err.is_empty() {
        return 0.0;
    }
    let sum: f64 = err
        .iter()
        .zip(y.iter().zip(y_new))
        .map(|(e, (a, b))| {
            let sc = ctrl.atol + ctrl.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / err.len() as f64).sqrt()
}

fn scaled_norm(v: &[f64], y: &[f64], ctrl: &StepControl) -> f64 {
    error_norm(v, y, y, ctrl)
}

struct Solver<'a, F> {
    rhs: F,
    ctrl: &'a StepControl,
    n_rhs: usize,
}

impl<F> Solver<'_, F>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    fn eval(&mut self, t: f64, y: &[f64], out: &mut [f64]) {
        self.n_rhs += 1;
        (self.rhs)(t, y, out);
    }

    /// Starting step from the local derivative scale; one extra rhs call
    /// unless the initial derivative vanishes.
    fn initial_step(&mut self, t0: f64, y0: &[f64], f0: &[f64], span: f64) -> f64 {
        let d0 = scaled_norm(y0, y0, self.ctrl);
        let d1 = scaled_norm(f0, y0, self.ctrl);
        if d1 == 0.0 {
            return span.abs();
        }
        let h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        }
        .min(span.abs());
        let dir = span.signum();
        let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + dir * h0 * f).collect();
        let mut f1 = vec![0.0; y0.len()];
        self.eval(t0 + dir * h0, &y1, &mut f1);
        let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
        let d2 = scaled_norm(&diff, y0, self.ctrl) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1)
    }

    fn solve(
        &mut self,
        y0: &[f64],
        (ta, tb): (f64, f64),
        dense_at: &[f64],
        keep_dense: bool,
    ) -> Result<(SolveRecord, DenseOutput)> {
        self.ctrl.validate()?;
        if ta == tb || !ta.is_finite() || !tb.is_finite() {
            return Err(Error::Config(format!("invalid time span ({ta}, {tb})")));
        }
        let n = y0.len();
        let dir = (tb - ta).signum();
        let span = tb - ta;

        let mut record = SolveRecord {
            times: vec![ta],
            states: vec![y0.to_vec()],
            ..Default::default()
        };
        let mut dense = DenseOutput::default();
        let mut pending: Vec<f64> = dense_at.to_vec();
        // order requests in integration direction
        pending.sort_by(|a, b| (dir * a).total_cmp(&(dir * b)));
        let mut next_req = 0usize;

        let mut t = ta;
        let mut y = y0.to_vec();
        let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
        self.eval(t, &y, &mut k[0]);

        let mut h_abs = match self.ctrl.h_init {
            Some(h) => h,
            None => self.initial_step(t, &y, &k[0], span),
        }
        .min(self.ctrl.h_max.unwrap_or(f64::INFINITY));

        while pending.get(next_req).is_some_and(|&r| dir * (r - ta) <= 0.0) {
            record.dense.push((pending[next_req], y.clone()));
            next_req += 1;
        }

        let mut y_stage = vec![0.0; n];
        let mut y_new = vec![0.0; n];
        let mut err = vec![0.0; n];
        let mut last_rejected = false;

        loop {
            if record.n_accepted + record.n_rejected >= self.ctrl.max_steps {
                return Err(Error::NonConvergence {
                    max_steps: self.ctrl.max_steps,
                    t,
                    record: Box::new(record),
                });
            }
            let remaining = (tb - t).abs();
            let mut last = false;
            if h_abs >= remaining * (1.0 - 1e-12) {
                h_abs = remaining;
                last = true;
            } else if h_abs < self.ctrl.h_min {
                return Err(Error::StepTooSmall {
                    t,
                    h: h_abs,
                    record: Box::new(record),
                });
            }
            let h = dir * h_abs;

            for s in 1..7 {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, kj) in k.iter().enumerate().take(s) {
                        acc += A[s][j] * kj[i];
                    }
                    y_stage[i] = y[i] + h * acc;
                }
                let t_stage = if s == 6 { t + h } else { t + C[s] * h };
                self.eval(t_stage, &y_stage, &mut k[s]);
                if s == 6 {
                    y_new.copy_from_slice(&y_stage);
                }
            }

            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    acc += E[j] * kj[i];
                }
                err[i] = h * acc;
            }
            let err_norm = error_norm(&err, &y, &y_new, self.ctrl);

            if err_norm <= 1.0 {
                if keep_dense || next_req < pending.len() {
                    let seg = self.segment(t, h, &y, &y_new, &k);
                    let t_next = if last { tb } else { t + h };
                    while let Some(&r) = pending.get(next_req) {
                        if dir * (r - t_next) > 0.0 {
                            break;
                        }
                        let mut out = vec![0.0; n];
                        seg.eval_into(r, &mut out);
                        record.dense.push((r, out));
                        next_req += 1;
                    }
                    if keep_dense {
                        dense.segments.push(seg);
                    }
                }
                t = if last { tb } else { t + h };
                std::mem::swap(&mut y, &mut y_new);
                k.swap(0, 6);
                record.n_accepted += 1;
                record.times.push(t);
                record.states.push(y.clone());
                if last {
                    break;
                }
                let fac = if err_norm == 0.0 {
                    FAC_MAX
                } else {
                    (self.ctrl.safety * err_norm.powf(-0.2)).clamp(FAC_MIN, FAC_MAX)
                };
                // no growth right after a rejection
                let fac = if last_rejected { fac.min(1.0) } else { fac };
                h_abs = (h_abs * fac).min(self.ctrl.h_max.unwrap_or(f64::INFINITY));
                last_rejected = false;
            } else {
                record.n_rejected += 1;
                let fac = (self.ctrl.safety * err_norm.powf(-0.2)).clamp(FAC_MIN, 1.0);
                h_abs *= fac;
                last_rejected = true;
            }
        }
        // requests beyond tb
        while let Some(&r) = pending.get(next_req) {
            record.dense.push((r, y.clone()));
            next_req += 1;
        }
        record.n_rhs_evals = self.n_rhs;
        Ok((record, dense))
    }

    fn segment(&self, t: f64, h: f64, y: &[f64], y_new: &[f64], k: &[Vec<f64>; 7]) -> DenseSegment {
        let n = y.len();
        let mut c1 = vec![0.0; n];
        let mut c2 = vec![0.0; n];
        let mut c3 = vec![0.0; n];
        let mut c4 = vec![0.0; n];
        for i in 0..n {
            let ydiff = y_new[i] - y[i];
            let bspl = h * k[0][i] - ydiff;
            c1[i] = ydiff;
            c2[i] = bspl;
            c3[i] = ydiff - h * k[6][i] - bspl;
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                acc += D[j] * kj[i];
            }
            c4[i] = h * acc;
        }
        DenseSegment {
            t_start: t,
            h,
            coeffs: [y.to_vec(), c1, c2, c3, c4],
        }
    }
}

/// Adaptive Dormand-Prince 5(4) solve of `y' = rhs(t, y)` over `t_span`.
///
/// `rhs(t, y, out)` writes the derivative into `out`. Backward integration
/// (`tb < ta`) is supported. Interpolated states at `dense_at` are returned
/// in `SolveRecord::dense`, sorted in integration direction.
pub fn dopri5_solve<F>(
    rhs: F,
    y0: &[f64],
    t_span: (f64, f64),
    ctrl: &StepControl,
    dense_at: &[f64],
) -> Result<SolveRecord>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut solver = Solver {
        rhs,
        ctrl,
        n_rhs: 0,
    };
    solver.solve(y0, t_span, dense_at, false).map(|(r, _)| r)
}

/// Backward solve from `t_span.0` down to `t_span.1`; the same machinery as
/// [`dopri5_solve`] with negative steps.
pub fn dopri5_solve_reverse<F>(
    rhs: F,
    y_end: &[f64],
    t_span: (f64, f64),
    ctrl: &StepControl,
) -> Result<SolveRecord>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if t_span.1 >= t_span.0 {
        return Err(Error::Config(format!(
            "reverse solve needs a decreasing span, got ({}, {})",
            t_span.0, t_span.1
        )));
    }
    dopri5_solve(rhs, y_end, t_span, ctrl, &[])
}

/// Like [`dopri5_solve`] but also keeps the continuous extension of every
/// accepted step so the trajectory can be queried anywhere in the span.
pub fn dopri5_solve_dense<F>(
    rhs: F,
    y0: &[f64],
    t_span: (f64, f64),
    ctrl: &StepControl,
) -> Result<(SolveRecord, DenseOutput)>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut solver = Solver {
        rhs,
        ctrl,
        n_rhs: 0,
    };
    solver.solve(y0, t_span, &[], true)
}
