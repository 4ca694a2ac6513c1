//! Polynomial bases for time-dependent weights.
//!
//! Every basis is evaluated in normalized time `s = (t - t0) / (T - t0)`, so a
//! basis matrix only depends on where the grid nodes sit inside the horizon and
//! not on the horizon length itself. Two families are provided:
//!
//! * monomials `1, s, s^2, ..., s^k`
//! * shifted Legendre polynomials `P_i(2s - 1)`, evaluated with the Bonnet
//!   recurrence `(n+1) P_{n+1}(x) = (2n+1) x P_n(x) - n P_{n-1}(x)`.
//!
//! `BasisFamily::None` stands for the non-parameterized baseline where every
//! time step owns an independent weight column.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisFamily {
    Monomial,
    Legendre,
    None,
}

impl fmt::Display for BasisFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BasisFamily::Monomial => "monomial",
            BasisFamily::Legendre => "legendre",
            BasisFamily::None => "none",
        })
    }
}

impl FromStr for BasisFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "monomial" | "mono" => Ok(BasisFamily::Monomial),
            "legendre" => Ok(BasisFamily::Legendre),
            "none" => Ok(BasisFamily::None),
            other => Err(Error::Config(format!("unknown basis `{other}`"))),
        }
    }
}

/// A basis family together with its highest polynomial degree.
///
/// Degree `k` means `k + 1` basis functions (indices `0..=k`). The degree is
/// ignored for [`BasisFamily::None`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisKind {
    pub family: BasisFamily,
    pub degree: usize,
}

impl BasisKind {
    pub const fn monomial(degree: usize) -> Self {
        Self {
            family: BasisFamily::Monomial,
            degree,
        }
    }

    pub const fn legendre(degree: usize) -> Self {
        Self {
            family: BasisFamily::Legendre,
            degree,
        }
    }

    pub const fn none() -> Self {
        Self {
            family: BasisFamily::None,
            degree: 0,
        }
    }

    pub fn is_polynomial(&self) -> bool {
        self.family != BasisFamily::None
    }

    /// Number of basis functions `d`, or `None` for the per-step baseline.
    pub fn n_functions(&self) -> Option<usize> {
        self.is_polynomial().then_some(self.degree + 1)
    }

    /// Evaluates basis function `i` at normalized time `s`.
    ///
    /// Panics if `i` exceeds the degree or the family is `None`.
    pub fn eval(&self, i: usize, s: f64) -> f64 {
        assert!(
            i <= self.degree,
            "basis index {i} out of range for degree {}",
            self.degree
        );
        match self.family {
            BasisFamily::Monomial => monomial(i, s),
            BasisFamily::Legendre => shifted_legendre(i, s),
            BasisFamily::None => panic!("basis `none` has no basis functions"),
        }
    }

    /// Evaluates all `d` basis functions at normalized time `s` into `out`.
    pub fn eval_all(&self, s: f64, out: &mut [f64]) {
        let d = self
            .n_functions()
            .expect("basis `none` has no basis functions");
        assert_eq!(out.len(), d, "output slice must hold {d} values");
        match self.family {
            BasisFamily::Monomial => {
                let mut p = 1.0;
                for o in out.iter_mut() {
                    *o = p;
                    p *= s;
                }
            }
            BasisFamily::Legendre => {
                let x = 2.0 * s - 1.0;
                out[0] = 1.0;
                if d > 1 {
                    out[1] = x;
                }
                for n in 1..d.saturating_sub(1) {
                    let nf = n as f64;
                    out[n + 1] = ((2.0 * nf + 1.0) * x * out[n] - nf * out[n - 1]) / (nf + 1.0);
                }
            }
            BasisFamily::None => unreachable!(),
        }
    }

    /// Column of basis evaluations `p(s)` as a vector of length `d`.
    pub fn eval_column(&self, s: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_functions().expect("basis `none` has no basis functions")];
        self.eval_all(s, &mut out);
        out
    }
}

impl fmt::Display for BasisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            BasisFamily::None => write!(f, "none"),
            fam => write!(f, "{fam}-{}", self.degree),
        }
    }
}

fn monomial(i: usize, s: f64) -> f64 {
    s.powi(i as i32)
}

/// Shifted Legendre polynomial on `[0, 1]` via the three-term recurrence.
fn shifted_legendre(n: usize, s: f64) -> f64 {
    let x = 2.0 * s - 1.0;
    if n == 0 {
        return 1.0;
    }
    let (mut prev, mut curr) = (1.0, x);
    for k in 1..n {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0) * x * curr - kf * prev) / (kf + 1.0);
        prev = curr;
        curr = next;
    }
    curr
}

/// Ordered time nodes inside a horizon `[t0, t_end]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    points: Vec<f64>,
}

impl TimeGrid {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn new(t0: f64, t_end: f64, points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one point".into()));
        }
        if !(t0.is_finite() && t_end.is_finite()) || t_end < t0 {
            return Err(Error::InvalidGrid(format!("bad horizon [{t0}, {t_end}]")));
        }
        if points.len() > 1 && t_end == t0 {
            return Err(Error::InvalidGrid(
                "degenerate horizon with more than one point".into(),
            ));
        }
        if points[0] != t0 {
            return Err(Error::InvalidGrid(format!(
                "first point {} must equal t0 = {t0}",
                points[0]
            )));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid("points must be strictly increasing".into()));
        }
        if *points.last().unwrap() > t_end {
            return Err(Error::InvalidGrid("last point lies beyond the horizon".into()));
        }
        Ok(Self { t0, t_end, points })
    }

    /// `n` equispaced points including both endpoints of `[t0, t_end]`.
    pub fn equispaced(t0: f64, t_end: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGrid("grid needs at least one point".into()));
        }
        let points = if n == 1 {
            vec![t0]
        } else {
            let h = (t_end - t0) / (n - 1) as f64;
            (0..n)
                .map(|j| if j == n - 1 { t_end } else { t0 + j as f64 * h })
                .collect()
        };
        Self::new(t0, t_end, points)
    }

    /// Start times of `n_steps` uniform steps over `[t0, t_end]`: `t0 + j*dt`
    /// for `j < n_steps`. These are the nodes where a discrete network reads
    /// its layer weights.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn step_nodes(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidGrid("need at least one step".into()));
        }
        if !(t_end > t0) {
            return Err(Error::InvalidGrid(format!("bad horizon [{t0}, {t_end}]")));
        }
        let h = (t_end - t0) / n_steps as f64;
        Self::new(
            t0,
            t_end,
            (0..n_steps).map(|j| t0 + j as f64 * h).collect(),
        )
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Maps `t` to normalized time in `[0, 1]`.
    pub fn normalize(&self, t: f64) -> f64 {
        let span = self.t_end - self.t0;
        if span == 0.0 {
            0.0
        } else {
            (t - self.t0) / span
        }
    }

    /// Uniform spacing if the points are equispaced with the last step ending
    /// at `t_end`, i.e. `points[j] = t0 + j*dt` and `t0 + len*dt = t_end`.
    pub fn uniform_step(&self) -> Option<f64> {
        let n = self.points.len();
        let dt = (self.t_end - self.t0) / n as f64;
        let tol = 1e-12 * (self.t_end - self.t0).abs().max(1.0);
        self.points
            .iter()
            .enumerate()
            .all(|(j, &p)| (p - (self.t0 + j as f64 * dt)).abs() <= tol)
            .then_some(dt)
    }

    /// Index of the node exactly at `t` (within a relative 1e-12).
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let tol = 1e-12 * (self.t_end - self.t0).abs().max(1.0);
        let j = self.points.partition_point(|&p| p < t - tol);
        (j < self.points.len() && (self.points[j] - t).abs() <= tol).then_some(j)
    }
}

/// Basis matrix `A` with `A[(i, j)] = p_i(t_j)`, shape `d x N`.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisMatrix(pub DMatrix<f64>);

impl BasisMatrix {
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// The Vandermonde matrix `V = A^T` (rows are time nodes).
    pub fn vandermonde(&self) -> DMatrix<f64> {
        self.0.transpose()
    }
}

pub fn eval_monomial(i: usize, t: f64, grid: &TimeGrid) -> f64 {
    monomial(i, grid.normalize(t))
}

pub fn eval_legendre(i: usize, t: f64, grid: &TimeGrid) -> f64 {
    shifted_legendre(i, grid.normalize(t))
}

pub fn build_basis_matrix(kind: BasisKind, grid: &TimeGrid) -> Result<BasisMatrix> {
    let d = kind.n_functions().ok_or(Error::NoBasisMatrix)?;
    let mut a = DMatrix::zeros(d, grid.len());
    let mut col = vec![0.0; d];
    for (j, &t) in grid.points().iter().enumerate() {
        kind.eval_all(grid.normalize(t), &mut col);
        for (i, &v) in col.iter().enumerate() {
            a[(i, j)] = v;
        }
    }
    Ok(BasisMatrix(a))
}

/// 2-norm condition number `sigma_max / sigma_min`.
///
/// Returns `f64::INFINITY` when `sigma_min <= eps * sigma_max * max(rows, cols)`.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    assert!(!m.is_empty(), "condition number of an empty matrix");
    let sv = m.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let cutoff = f64::EPSILON * smax * m.nrows().max(m.ncols()) as f64;
    if smin <= cutoff || smax == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionRow {
    pub family: BasisFamily,
    pub degree: usize,
    pub cond2: f64,
    /// Set when `degree + 1` exceeds the number of grid points.
    pub rank_deficient: bool,
}

/// One `(family, degree, cond2)` row per requested combination, computed on
/// the Vandermonde matrix of `grid`.
pub fn conditioning_report(
    families: &[BasisFamily],
    degrees: &[usize],
    grid: &TimeGrid,
) -> Result<Vec<ConditionRow>> {
    if degrees.is_empty() {
        return Err(Error::Config("conditioning report needs at least one degree".into()));
    }
    let mut rows = Vec::with_capacity(families.len() * degrees.len());
    for &family in families {
        if family == BasisFamily::None {
            return Err(Error::NoBasisMatrix);
        }
        for &degree in degrees {
            let kind = BasisKind { family, degree };
            let rank_deficient = degree >= grid.len();
            let cond2 = if rank_deficient {
                f64::INFINITY
            } else {
                condition_number(&build_basis_matrix(kind, grid)?.vandermonde())
            };
            rows.push(ConditionRow {
                family,
                degree,
                cond2,
                rank_deficient,
            });
        }
    }
    Ok(rows)
}
