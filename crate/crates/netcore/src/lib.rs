//! Minimal numeric substrate for small trajectory models.
//!
//! Everything is 64-bit and sized for models with a few thousand to a few
//! hundred thousand parameters: a recorded-graph reverse-mode differentiator
//! ([`Graph`]), the handful of layers the models need ([`layers`]), an
//! adaptive-moment optimizer ([`optim`]), central-difference gradient checks
//! ([`gradcheck`]) and a text checkpoint container ([`checkpoint`]).

pub mod checkpoint;
pub mod eigen;
mod error;
pub mod gradcheck;
mod graph;
pub mod layers;
pub mod optim;
mod params;

pub use error::{NetError, Result};
pub use gradcheck::{grad_check, grad_of, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Var};
pub use optim::{optimizer_step, AdamConfig};
pub use params::{Grads, ParamId, ParamStore, ParamVars};

/// Dense column-major matrix used throughout.
pub type Mat = nalgebra::DMatrix<f64>;

/// Returns true when every entry of `m` is finite.
pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}
