//! Continuous-time residual networks with polynomial weight
//! parameterization.
//!
//! Layer weights are written as `theta(t) = Theta p(t)` for a fixed
//! polynomial basis `p` (monomial or shifted Legendre). Three architectures
//! share that parameterization: a forward-Euler ResNet, a Verlet
//! (Hamiltonian) network and a neural ODE integrated by an adaptive
//! Dormand-Prince solver and trained with the continuous adjoint.

pub mod arch;
pub mod basis;
pub mod data;
pub mod error;
pub mod gradients;
pub mod integrators;
pub mod model;
pub mod optim;

pub use arch::{Activation, Arch, EvalCounter, ModelConfig};
pub use basis::{BasisFamily, BasisKind, TimeGrid};
pub use data::{Dataset, SplitSpec};
pub use error::{Error, Result};
pub use integrators::StepControl;
pub use model::{GradBundle, Model, Params};
pub use optim::{train, RunMetrics, TrainConfig};
