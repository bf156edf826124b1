//! Config sections to core model specs.

use mfgmaster::models::{hamiltonian_model, linear_model, EntryExitSpec, HamiltonianSpec, LinearSpec};
use mfgmaster::ModelSpec;
use nalgebra::DMatrix;

use crate::config::{EntryExitConfig, HamiltonianConfig, InitialKind, LinearConfig, ModelConfig, RunConfig};
use crate::CliError;

fn matrix(rows: &[Vec<f64>], d: usize, what: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(CliError::Config(format!("model.{what} must be {d}x{d}")));
    }
    Ok(DMatrix::from_row_iterator(d, d, rows.iter().flatten().copied()))
}

fn linear(cfg: &LinearConfig) -> Result<ModelSpec, CliError> {
    let d = cfg.a.len();
    let mut spec = LinearSpec::new(matrix(&cfg.a, d, "a")?).with_discount(cfg.discount);
    if let Some(b) = &cfg.b {
        spec = spec.with_value_coupling(matrix(b, d, "b")?);
    }
    if let Some(c) = &cfg.c {
        spec = spec.with_offset(c.clone());
    }
    if let Some(m) = &cfg.m {
        spec = spec.with_transport(matrix(m, d, "m")?);
    }
    match (&cfg.q, &cfg.q0) {
        (None, None) => {}
        (q, q0) => {
            let q = match q {
                Some(q) => matrix(q, d, "q")?,
                None => DMatrix::zeros(d, d),
            };
            spec = spec.with_initial(q, q0.clone().unwrap_or_else(|| vec![0.0; d]));
        }
    }
    let mut model = linear_model(&spec)?;
    if let Some(noise) = &cfg.noise {
        model = model.with_noise(noise.lambda, matrix(&noise.t, d, "noise.t")?);
    }
    Ok(model)
}

fn hamiltonian(cfg: &HamiltonianConfig, d: usize) -> Result<ModelSpec, CliError> {
    let (a, c) = (cfg.cost_scale, cfg.h_scale);
    let spec = HamiltonianSpec::new(d)
        .with_cost(move |x, o| {
            for (oi, xi) in o.iter_mut().zip(x) {
                *oi = a * xi;
            }
        })
        .with_hamiltonian(move |q| 0.5 * c * q * q, move |q| c * q);
    let model = hamiltonian_model(&spec)?.with_discount(cfg.discount);
    Ok(match cfg.initial {
        InitialKind::Identity => model.with_initial(|x, o| o.copy_from_slice(x)),
        InitialKind::Zero => model.with_initial(|_, o| o.fill(0.0)),
    })
}

pub fn entry_exit(cfg: &EntryExitConfig, radius: Option<f64>) -> EntryExitSpec {
    let (a, k) = (cfg.intercept, cfg.slope);
    let mut spec = EntryExitSpec::new(move |x| a + k * x, cfg.b, cfg.s, cfg.r);
    spec.radius = radius;
    spec.waive_increasing = cfg.waive_increasing;
    spec
}

/// The model on the orthant, with the configured grid radius when one is given.
pub fn build(cfg: &RunConfig) -> Result<ModelSpec, CliError> {
    let radius = cfg.grid.as_ref().and_then(|g| g.radius);
    let model = match &cfg.model {
        ModelConfig::Linear(l) => linear(l)?,
        ModelConfig::Hamiltonian(h) => {
            let d = cfg
                .grid
                .as_ref()
                .map(|g| g.d)
                .ok_or_else(|| CliError::Config("appendix-b takes its dimension from [grid]".into()))?;
            hamiltonian(h, d)?
        }
        ModelConfig::EntryExit(e) => {
            let h = cfg.grid.as_ref().map_or(1.0 / 64.0, |g| g.h);
            return Ok(mfgmaster::models::entry_exit_model(&entry_exit(e, radius), h)?);
        }
    };
    if let Some(g) = &cfg.grid {
        if g.d != model.dim() {
            return Err(CliError::Config(format!("grid.d = {} but the model has {} states", g.d, model.dim())));
        }
    }
    Ok(match radius {
        Some(r) => model.with_radius(r),
        None => model,
    })
}
