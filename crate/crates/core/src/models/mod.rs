//! Built-in model families, selected in run configs by name.

pub mod entry_exit;
pub mod hamiltonian;
pub mod linear;

pub use entry_exit::{
    entry_exit_limit, entry_exit_model, solve_entry_exit_penalized, verify_entry_exit, EntryExitLevel,
    EntryExitResult, EntryExitSpec, GradientBound,
};
pub use hamiltonian::{
    hamiltonian_model, mass_conservation, reduce_field, reduced_model, simplex_lift, HamiltonianSpec,
};
pub use linear::{linear_model, LinearSpec};
