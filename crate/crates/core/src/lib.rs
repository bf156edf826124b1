//! Finite-state mean field game master equations: solvers on the simplex grid,
//! characteristics, optimal stopping and impulse control by penalization, and
//! certification of monotone solutions.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(a > b)` rejects NaN on purpose

pub mod characteristics;
pub mod error;
pub mod grid;
pub mod hypotheses;
pub mod impulse;
pub mod model;
pub mod models;
pub mod numerics;
pub mod sampling;
pub mod stopping;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{build_grid, Grid, GridField};
pub use hypotheses::{HypothesisReport, Verdict, Witness};
pub use model::{ModelSpec, OrthantPoint};
pub use sampling::Sampler;
