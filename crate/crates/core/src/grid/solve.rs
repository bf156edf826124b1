use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::scheme::{Engine, Penalty, RelaxOptions, Viscosity};
use super::{Grid, GridField};
use crate::error::{Error, Result};
use crate::hypotheses::{check_boundary_invariance, check_mass_bound, HypothesisReport};
use crate::model::ModelSpec;
use crate::numerics::spectral_norm;
use crate::sampling::Sampler;

/// Seed and size of the hypothesis screen run before each solve.
const SCREEN_SEED: u64 = 0x5c7e_e11;
const SCREEN_SAMPLES: usize = 512;

#[derive(Debug, Clone, Copy)]
pub struct TdOptions {
    /// Hyperbolic CFL limit for `dt (sum |w| / h + 2 lambda)`.
    pub cfl: f64,
    /// Skip the boundary-invariance screen.
    pub force: bool,
    /// Keep every `store_every`-th step (the final time is always kept).
    pub store_every: usize,
}

impl Default for TdOptions {
    fn default() -> Self {
        Self {
            cfl: 0.9,
            force: false,
            store_every: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StationaryOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Iterations over which the residual must drop tenfold.
    pub window: usize,
    pub cfl: f64,
    pub force: bool,
}

impl Default for StationaryOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 5_000_000,
            window: 20_000,
            cfl: 0.9,
            force: false,
        }
    }
}

impl StationaryOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub(crate) fn relax(&self) -> RelaxOptions {
        RelaxOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            window: self.window,
            cfl: self.cfl,
        }
    }
}

fn refuse(module: &'static str, report: HypothesisReport) -> Result<()> {
    if report.verdict == crate::hypotheses::Verdict::Fail {
        return Err(Error::HypothesisRefused {
            module,
            hypothesis: report.hypothesis,
            margin: report.margin,
        });
    }
    Ok(())
}

pub(crate) fn screen(spec: &ModelSpec, grid: &Grid, module: &'static str, stationary: bool) -> Result<()> {
    let sampler = Sampler::new(SCREEN_SEED, SCREEN_SAMPLES, grid.radius());
    refuse(module, check_boundary_invariance(spec, &sampler, None)?)?;
    if stationary {
        refuse(module, check_mass_bound(&spec.clone().with_radius(grid.radius()), &sampler)?)?;
    }
    Ok(())
}

pub(crate) fn initial_slice(spec: &ModelSpec, grid: &Grid) -> Result<Vec<f64>> {
    let d = grid.dim();
    let u0 = spec
        .initial_fn()
        .ok_or_else(|| Error::InvalidSpec("time-dependent solves need an initial value map".into()))?;
    let mut values = vec![0.0; grid.len() * d];
    values.par_chunks_mut(d).enumerate().try_for_each(|(n, out)| {
        u0(grid.node(n), out);
        crate::model::check_finite("U0", out, grid.node(n), &[])
    })?;
    Ok(values)
}

pub(crate) fn steps_for(t_f: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0) || !(t_f > 0.0) || !t_f.is_finite() {
        return Err(Error::InvalidArgument(format!("need dt > 0 and t_f > 0, got dt={dt}, t_f={t_f}")));
    }
    let n = ((t_f / dt) - 1e-9).ceil().max(1.0) as usize;
    Ok((n, t_f / n as f64))
}

/// Explicit march shared by the plain, viscous and penalized time-dependent solves.
pub(crate) fn march(
    engine: &Engine<'_>,
    grid: Arc<Grid>,
    start: Vec<f64>,
    t_f: f64,
    dt: f64,
    penalty: Option<&dyn Penalty>,
    opts: TdOptions,
) -> Result<GridField> {
    let (n, step) = steps_for(t_f, dt)?;
    let every = opts.store_every.max(1);
    let mut times = vec![0.0];
    let mut slices = vec![start.clone()];
    let mut u = start;
    let mut next = vec![0.0; u.len()];
    for k in 1..=n {
        let t = k as f64 * step;
        engine.step(&u, step, t, penalty, opts.cfl, &mut next)?;
        std::mem::swap(&mut u, &mut next);
        if k % every == 0 || k == n {
            times.push(t);
            slices.push(u.clone());
        }
    }
    GridField::new(grid, times, slices)
}

/// Time-dependent master equation from `U(0) = U0` to `t_f` by explicit upwinding.
///
/// The step is `t_f / ceil(t_f / dt)`, so the last slice lands exactly on `t_f`.
pub fn solve_td(spec: &ModelSpec, grid: &Arc<Grid>, t_f: f64, dt: f64) -> Result<GridField> {
    solve_td_with(spec, grid, t_f, dt, TdOptions::default())
}

pub fn solve_td_with(spec: &ModelSpec, grid: &Arc<Grid>, t_f: f64, dt: f64, opts: TdOptions) -> Result<GridField> {
    let engine = Engine::new(spec, grid, None, "solve_td")?;
    if !opts.force {
        screen(spec, grid, "solve_td", false)?;
    }
    let start = initial_slice(spec, grid)?;
    march(&engine, grid.clone(), start, t_f, dt, None, opts)
}

/// Time-dependent solve with the degenerate diffusion `eps sum_j sigma(x_j) d_jj U^i`
/// and drift `eps sigma'(x_i) d_i U^i`, `sigma(x) = x^2 s^2 / (x^2 + s^2)`, `s = R/4`.
/// With `eps_visc = 0` this is exactly [`solve_td`].
pub fn solve_viscous(spec: &ModelSpec, grid: &Arc<Grid>, eps_visc: f64, t_f: f64, dt: f64) -> Result<GridField> {
    if !(eps_visc >= 0.0) {
        return Err(Error::InvalidArgument(format!("eps_visc must be >= 0, got {eps_visc}")));
    }
    let visc = Viscosity {
        eps: eps_visc,
        s: grid.radius() / 4.0,
    };
    let engine = Engine::new(spec, grid, Some(visc), "solve_viscous")?;
    screen(spec, grid, "solve_viscous", false)?;
    let start = initial_slice(spec, grid)?;
    march(&engine, grid.clone(), start, t_f, dt, None, TdOptions::default())
}

/// Stationary master equation by false-transient relaxation.
pub fn solve_stationary(spec: &ModelSpec, grid: &Arc<Grid>, tol: f64) -> Result<GridField> {
    solve_stationary_with(spec, grid, StationaryOptions::default().with_tol(tol), None)
}

/// As [`solve_stationary`], optionally warm-started from `start`.
pub fn solve_stationary_with(
    spec: &ModelSpec,
    grid: &Arc<Grid>,
    opts: StationaryOptions,
    start: Option<&[f64]>,
) -> Result<GridField> {
    spec.require_discount()?;
    let engine = Engine::new(spec, grid, None, "solve_stationary")?;
    if !opts.force {
        screen(spec, grid, "solve_stationary", true)?;
    }
    let u0 = start.map_or_else(|| vec![0.0; grid.len() * grid.dim()], <[f64]>::to_vec);
    let u = engine.relax(u0, None, opts.relax())?;
    GridField::new(grid.clone(), vec![0.0], vec![u])
}

/// Per-node difference approximation of `D_x U`; entry `(i, j)` is `d_j U^i`.
#[derive(Debug, Clone)]
pub struct GradientField {
    pub matrices: Vec<DMatrix<f64>>,
    /// Largest operator norm over nodes.
    pub max_norm: f64,
}

/// Central differences where both neighbors exist, one-sided otherwise; exact for affine fields.
pub fn gradient(field: &GridField, slice: usize) -> GradientField {
    let grid = field.grid();
    let d = grid.dim();
    let h = grid.spacing();
    let u = field.slice(slice);
    let matrices: Vec<DMatrix<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|n| {
            let mut a = DMatrix::zeros(d, d);
            for j in 0..d {
                let (lo, hi, span) = match (grid.minus(n, j), grid.plus(n, j)) {
                    (Some(m), Some(p)) => (m, p, 2.0 * h),
                    (None, Some(p)) => (n, p, h),
                    (Some(m), None) => (m, n, h),
                    // on the face with k_j = 0: forward difference taken one step back along a nonzero axis
                    (None, None) => match (0..d).find_map(|m| grid.minus(n, m)).and_then(|b| Some((b, grid.plus(b, j)?))) {
                        Some((b, f)) => (b, f, h),
                        None => continue,
                    },
                };
                for i in 0..d {
                    a[(i, j)] = (u[hi * d + i] - u[lo * d + i]) / span;
                }
            }
            a
        })
        .collect();
    let max_norm = matrices.iter().map(spectral_norm).fold(0.0, f64::max);
    GradientField { matrices, max_norm }
}
