//! A configured network with its parameters, plus the checkpoint format.
//!
//! # Checkpoint format
//!
//! Plain UTF-8 text, one record per line:
//!
//! ```text
//! contnet-checkpoint 1
//! config {"arch":"resnet",...}
//! matrix theta <rows> <cols>
//! <row 0 values separated by single spaces>
//! ...
//! matrix k_in <rows> <cols>
//! ...
//! matrix b_in <rows> 1
//! matrix w_out <rows> <cols>
//! matrix b_out <rows> 1
//! end
//! ```
//!
//! Matrices appear in the fixed order above and are written row-major. Values
//! use Rust's shortest round-trip float formatting, so save/load is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::arch::{
    close, hamiltonian_forward, node_rhs, open, resnet_forward, Arch, ClosingLayer, EvalCounter,
    ModelConfig, OpeningLayer, ParamWeights,
};
use crate::basis::TimeGrid;
use crate::error::{Error, Result};
use crate::integrators::{dopri5_solve, StepControl};

/// Every trainable parameter of a network. Gradients use the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub theta: ParamWeights,
    pub open: OpeningLayer,
    pub close: ClosingLayer,
}

/// Gradient of the loss with respect to every block of [`Params`].
pub type GradBundle = Params;

pub const BLOCK_NAMES: [&str; 5] = ["theta", "k_in", "b_in", "w_out", "b_out"];

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let w = cfg.layer_width();
        Self {
            theta: ParamWeights::zeros(cfg),
            open: OpeningLayer {
                k_in: DMatrix::zeros(w, cfg.n_features),
                b_in: DVector::zeros(w),
            },
            close: ClosingLayer {
                w_out: DMatrix::zeros(cfg.m_targets, cfg.channels),
                b_out: DVector::zeros(cfg.m_targets),
            },
        }
    }

    /// Blocks in checkpoint/flattening order.
    pub fn blocks(&self) -> [&[f64]; 5] {
        [
            self.theta.theta.as_slice(),
            self.open.k_in.as_slice(),
            self.open.b_in.as_slice(),
            self.close.w_out.as_slice(),
            self.close.b_out.as_slice(),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.theta.theta.as_mut_slice(),
            self.open.k_in.as_mut_slice(),
            self.open.b_in.as_mut_slice(),
            self.close.w_out.as_mut_slice(),
            self.close.b_out.as_mut_slice(),
        ]
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn assign_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.len(), "flat parameter length");
        let mut off = 0;
        for block in self.blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&v[off..off + n]);
            off += n;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.blocks().iter().flat_map(|b| b.iter()).map(|v| v * v).sum()
    }

    /// `self += scale * other`, block by block.
    pub fn axpy(&mut self, scale: f64, other: &Params) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            assert_eq!(dst.len(), src.len(), "parameter block shapes differ");
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let z = Params::zeros(cfg);
        let ok = self.theta.theta.shape() == z.theta.theta.shape()
            && self.open.k_in.shape() == z.open.k_in.shape()
            && self.open.b_in.len() == z.open.b_in.len()
            && self.close.w_out.shape() == z.close.w_out.shape()
            && self.close.b_out.len() == z.close.b_out.len();
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("parameters do not match the model configuration".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(cfg: ModelConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(&cfg)?;
        Ok(Self { cfg, params })
    }

    pub fn grid(&self) -> TimeGrid {
        self.cfg
            .weight_grid()
            .expect("validated configuration yields a grid")
    }

    /// State at the final time, `channels x batch`.
    pub fn final_state(
        &self,
        y: &DMatrix<f64>,
        counter: &EvalCounter,
        ode: &StepControl,
    ) -> Result<DMatrix<f64>> {
        let grid = self.grid();
        let u0 = open(y, &self.params.open, self.cfg.activation);
        match self.cfg.arch {
            Arch::ResNet => {
                Ok(resnet_forward(&u0, &self.params.theta, &self.cfg, &grid, counter)?
                    .last()
                    .clone())
            }
            Arch::Hamiltonian => Ok(hamiltonian_forward(
                &u0,
                &self.params.theta,
                &self.cfg,
                &grid,
                counter,
            )?
            .stacked_last()),
            Arch::NeuralOde => {
                let (rows, cols) = u0.shape();
                let mut err = None;
                let rec = dopri5_solve(
                    |t, y, out| {
                        let u = DMatrix::from_column_slice(rows, cols, y);
                        match node_rhs(&u, t, &self.params.theta, &self.cfg, &grid, counter) {
                            Ok(f) => out.copy_from_slice(f.as_slice()),
                            Err(e) => {
                                err.get_or_insert(e);
                                out.fill(0.0);
                            }
                        }
                    },
                    u0.as_slice(),
                    (0.0, self.cfg.t_end),
                    ode,
                    &[],
                )?;
                if let Some(e) = err {
                    return Err(e);
                }
                Ok(DMatrix::from_column_slice(rows, cols, rec.final_state()))
            }
        }
    }

    /// Predictions `m_targets x batch`.
    pub fn predict(
        &self,
        y: &DMatrix<f64>,
        counter: &EvalCounter,
        ode: &StepControl,
    ) -> Result<DMatrix<f64>> {
        Ok(close(&self.final_state(y, counter, ode)?, &self.params.close))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_checkpoint_string().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&fs::read_to_string(path)?)
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::from("contnet-checkpoint 1\n");
        s.push_str("config ");
        s.push_str(&serde_json::to_string(&self.cfg).expect("config serializes"));
        s.push('\n');
        let p = &self.params;
        write_matrix(&mut s, "theta", &p.theta.theta);
        write_matrix(&mut s, "k_in", &p.open.k_in);
        write_matrix(&mut s, "b_in", &DMatrix::from_column_slice(p.open.b_in.len(), 1, p.open.b_in.as_slice()));
        write_matrix(&mut s, "w_out", &p.close.w_out);
        write_matrix(&mut s, "b_out", &DMatrix::from_column_slice(p.close.b_out.len(), 1, p.close.b_out.as_slice()));
        s.push_str("end\n");
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("contnet-checkpoint 1") {
            return Err(bad("missing or unsupported header"));
        }
        let cfg_line = lines.next().ok_or_else(|| bad("missing config line"))?;
        let cfg_json = cfg_line
            .strip_prefix("config ")
            .ok_or_else(|| bad("expected `config` record"))?;
        let cfg: ModelConfig =
            serde_json::from_str(cfg_json).map_err(|e| bad(&format!("config: {e}")))?;
        let mut mats = Vec::with_capacity(5);
        for name in BLOCK_NAMES {
            mats.push(read_matrix(&mut lines, name)?);
        }
        if lines.next() != Some("end") {
            return Err(bad("missing `end` record"));
        }
        let mut it = mats.into_iter();
        let mut next = || it.next().unwrap();
        let theta = next();
        let k_in = next();
        let b_in = next();
        let w_out = next();
        let b_out = next();
        let params = Params {
            theta: ParamWeights { theta },
            open: OpeningLayer {
                k_in,
                b_in: DVector::from_column_slice(b_in.as_slice()),
            },
            close: ClosingLayer {
                w_out,
                b_out: DVector::from_column_slice(b_out.as_slice()),
            },
        };
        Model::new(cfg, params)
    }
}

fn write_matrix(s: &mut String, name: &str, m: &DMatrix<f64>) {
    use std::fmt::Write as _;
    let _ = writeln!(s, "matrix {name} {} {}", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
}

fn read_matrix<'a>(lines: &mut impl Iterator<Item = &'a str>, name: &str) -> Result<DMatrix<f64>> {
    let bad = |m: String| Error::Checkpoint(m);
    let header = lines
        .next()
        .ok_or_else(|| bad(format!("missing matrix `{name}`")))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "matrix" || parts[1] != name {
        return Err(bad(format!("expected `matrix {name} <rows> <cols>`, got `{header}`")));
    }
    let rows: usize = parts[2].parse().map_err(|_| bad(format!("bad row count for {name}")))?;
    let cols: usize = parts[3].parse().map_err(|_| bad(format!("bad column count for {name}")))?;
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("matrix {name} truncated at row {r}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("matrix {name} row {r}: {e}")))?;
        if vals.len() != cols {
            return Err(bad(format!("matrix {name} row {r} has {} values, expected {cols}", vals.len())));
        }
        for (c, v) in vals.into_iter().enumerate() {
            m[(r, c)] = v;
        }
    }
    Ok(m)
}
