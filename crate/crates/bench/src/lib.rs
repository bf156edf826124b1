//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use mfgmaster::models::{hamiltonian_model, HamiltonianSpec};
use mfgmaster::{Grid, ModelSpec};

/// Two-state switching model with `U0 = x`, discount 1.
pub fn switching(d: usize) -> ModelSpec {
    hamiltonian_model(&HamiltonianSpec::new(d))
        .expect("default switching cost is valid")
        .with_discount(1.0)
        .with_initial(|x, o| o.copy_from_slice(x))
}

pub fn simplex(d: usize, h: f64) -> Arc<Grid> {
    Arc::new(Grid::new(d, 1.0, h).expect("benchmark grids stay under the node cap"))
}
