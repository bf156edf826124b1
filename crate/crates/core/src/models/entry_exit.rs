//! Market game with entry and exit, on a one-dimensional grid in the aggregate capital `K`.
//!
//! The penalized value solves
//! `r U + (1/eps)(beta'(U - s) K - (b - U)_+) U' + (1/eps)(U - s)_+ = g(K)`,
//! and its `eps -> 0` limit is checked against the two-sided variational inequality
//! with `V` ranging over `[b, s]`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gradient, Engine, Grid, GridField, Penalty, StationaryOptions};
use crate::model::ModelSpec;
use crate::models::hamiltonian::ScalarFn;
use crate::numerics::sup_norm;
use crate::stopping::{beta_prime, StoppingConfig};
use crate::verify::{verify_interval, VerificationReport};

pub const CONFIG_NAME: &str = "entry-exit";

const MONOTONE_SAMPLES: usize = 256;
const LIPSCHITZ_CELLS: usize = 1024;

#[derive(Clone)]
pub struct EntryExitSpec {
    g: ScalarFn,
    /// Entry cost.
    pub b: f64,
    /// Exit cost.
    pub s: f64,
    pub r: f64,
    /// `R_K`; chosen from `g` when unset.
    pub radius: Option<f64>,
    pub beta_prime_at_zero: f64,
    /// Skips the sampled check that `g` increases (flat test revenues).
    pub waive_increasing: bool,
}

impl std::fmt::Debug for EntryExitSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EntryExitSpec")
            .field("b", &self.b)
            .field("s", &self.s)
            .field("r", &self.r)
            .field("radius", &self.radius)
            .finish()
    }
}

impl EntryExitSpec {
    pub fn new<G>(g: G, b: f64, s: f64, r: f64) -> Self
    where
        G: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            g: Arc::new(g),
            b,
            s,
            r,
            radius: None,
            beta_prime_at_zero: 0.0,
            waive_increasing: false,
        }
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = Some(radius);
        self
    }

    pub fn waive_increasing_check(mut self) -> Self {
        self.waive_increasing = true;
        self
    }

    pub fn g(&self, k: f64) -> f64 {
        (self.g)(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0) || !self.r.is_finite() {
            return Err(Error::InvalidSpec(format!("discount must be > 0, got {}", self.r)));
        }
        if !(self.b < self.s) || !self.b.is_finite() || !self.s.is_finite() {
            return Err(Error::InvalidSpec(format!("entry cost {} must be below exit cost {}", self.b, self.s)));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidSpec(format!("K radius must be > 0, got {r}")));
            }
        }
        if !self.waive_increasing {
            let top = self.radius.unwrap_or(10.0 * self.s.abs().max(1.0));
            let mut prev = self.g(0.0);
            for k in 1..=MONOTONE_SAMPLES {
                let cur = self.g(top * k as f64 / MONOTONE_SAMPLES as f64);
                if !cur.is_finite() || cur < prev {
                    return Err(Error::InvalidSpec(format!(
                        "revenue g is not increasing near K = {}",
                        top * k as f64 / MONOTONE_SAMPLES as f64
                    )));
                }
                prev = cur;
            }
        }
        Ok(())
    }

    /// `R_K`: the configured radius, or the largest `K` with `g(K) <= 2 r s` rounded up to a
    /// multiple of `h`.
    pub fn radius_for(&self, h: f64) -> Result<f64> {
        if let Some(r) = self.radius {
            return Ok(r);
        }
        let cap = 2.0 * self.r * self.s;
        if self.g(0.0) > cap {
            return Err(Error::InvalidSpec("g(0) already exceeds 2 r s; set the K radius explicitly".into()));
        }
        let mut hi = 1.0;
        while self.g(hi) <= cap {
            hi *= 2.0;
            if hi > 1e9 {
                return Err(Error::InvalidSpec(
                    "g never exceeds 2 r s; set the K radius explicitly".into(),
                ));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.g(mid) <= cap {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(((lo / h) - 1e-9).ceil().max(1.0) * h)
    }

    /// `Lip(g) / r`, with `Lip(g)` sampled on `[0, radius]`.
    pub fn gradient_bound(&self, radius: f64) -> f64 {
        let w = radius / LIPSCHITZ_CELLS as f64;
        let lip = (0..LIPSCHITZ_CELLS)
            .map(|k| ((self.g((k + 1) as f64 * w) - self.g(k as f64 * w)) / w).abs())
            .fold(0.0, f64::max);
        lip / self.r
    }
}

/// `F = 0`, `G = g(K)`, discount `r`, radius `R_K`.
pub fn entry_exit_model(spec: &EntryExitSpec, h: f64) -> Result<ModelSpec> {
    spec.validate()?;
    let radius = spec.radius_for(h)?;
    let g = spec.g.clone();
    Ok(ModelSpec::new(1, |_: &[f64], _: &[f64], o: &mut [f64]| o[0] = 0.0, move |x: &[f64], _: &[f64], o: &mut [f64]| {
        o[0] = g(x[0])
    })
    .named(CONFIG_NAME)
    .with_discount(spec.r)
    .with_radius(radius))
}

struct EntryExitPenalty {
    inv_eps: f64,
    b: f64,
    s: f64,
    beta0: f64,
}

impl Penalty for EntryExitPenalty {
    fn inv_eps(&self) -> f64 {
        self.inv_eps
    }

    fn add_velocity(&self, _node: usize, x: &[f64], u: &[f64], v: &mut [f64]) {
        v[0] += self.inv_eps * (beta_prime(u[0] - self.s, self.beta0) * x[0] - (self.b - u[0]).max(0.0));
    }

    fn obstacle(&self, _node: usize, _comp: usize, _u: &[f64]) -> Option<f64> {
        Some(self.s)
    }
}

/// Penalized stationary value at one `eps`; starts from `g / r` unless a warm start is given.
pub fn solve_entry_exit_penalized(
    spec: &EntryExitSpec,
    h: f64,
    eps: f64,
    opts: StationaryOptions,
    start: Option<&[f64]>,
) -> Result<GridField> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let model = entry_exit_model(spec, h)?;
    let grid = Arc::new(Grid::new(1, model.radius, h)?);
    if !opts.force {
        crate::grid::solve::screen(&model, &grid, "entry-exit", true)?;
    }
    let engine = Engine::new(&model, &grid, None, "entry-exit")?;
    let mut pen = penalty(spec, eps);
    let u0 = match start {
        Some(s) => s.to_vec(),
        None => (0..grid.len()).map(|n| spec.g(grid.node(n)[0]) / spec.r).collect(),
    };
    let u = engine.relax(u0, Some(&mut pen), opts.relax())?;
    GridField::new(grid, vec![0.0], vec![u])
}

fn penalty(spec: &EntryExitSpec, eps: f64) -> EntryExitPenalty {
    EntryExitPenalty {
        inv_eps: 1.0 / eps,
        b: spec.b,
        s: spec.s,
        beta0: spec.beta_prime_at_zero,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryExitLevel {
    pub eps: f64,
    /// `max (U - s)_+`.
    pub above: f64,
    /// `max (b - U)_+`.
    pub below: f64,
    pub grad_norm: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBound {
    /// `Lip(g) / r`.
    pub bound: f64,
    pub observed: f64,
    pub holds: bool,
}

#[derive(Debug, Clone)]
pub struct EntryExitResult {
    pub field: GridField,
    pub levels: Vec<EntryExitLevel>,
    pub gradient: GradientBound,
}

/// `eps` continuation along the schedule, each level warm-started from the previous one.
pub fn entry_exit_limit(
    spec: &EntryExitSpec,
    h: f64,
    config: &StoppingConfig,
    opts: StationaryOptions,
) -> Result<EntryExitResult> {
    config.validate()?;
    let spec = &EntryExitSpec {
        beta_prime_at_zero: config.beta_prime_at_zero,
        ..spec.clone()
    };
    let model = entry_exit_model(spec, h)?;
    let mut opts = opts;
    let mut levels = Vec::with_capacity(config.schedule.len());
    let mut current: Option<GridField> = None;
    for &eps in &config.schedule {
        let field = solve_entry_exit_penalized(spec, h, eps, opts, current.as_ref().map(GridField::last))?;
        opts.force = true;
        let engine = Engine::new(&model, field.grid(), None, "entry-exit")?;
        let residual = sup_norm(&engine.stationary_residual(field.last(), Some(&penalty(spec, eps)))?);
        let u = field.last();
        levels.push(EntryExitLevel {
            eps,
            above: u.iter().fold(0.0_f64, |m, v| m.max(v - spec.s)),
            below: u.iter().fold(0.0_f64, |m, v| m.max(spec.b - v)),
            grad_norm: gradient(&field, 0).max_norm,
            residual,
        });
        current = Some(field);
    }
    let field = current.expect("validated schedule is nonempty");
    let bound = spec.gradient_bound(field.grid().radius());
    let observed = gradient(&field, 0).max_norm;
    Ok(EntryExitResult {
        gradient: GradientBound {
            bound,
            observed,
            holds: observed <= bound * (1.0 + 1e-9) + h,
        },
        field,
        levels,
    })
}

/// Two-sided check `b - tol <= U <= s + tol`, then the inequality
/// `r U(K0)(K0 - y) >= g(K0)(K0 - y)` at strict minima of `(U(K) - V)(K - y)`, `V` in `[b, s]`.
pub fn verify_entry_exit(
    field: &GridField,
    spec: &EntryExitSpec,
    n_samples: usize,
    tol: f64,
    seed: u64,
) -> Result<VerificationReport> {
    let g = spec.g.clone();
    verify_interval(field, spec.r, &move |k| g(k), (spec.b, spec.s), n_samples, tol, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear() -> EntryExitSpec {
        EntryExitSpec::new(|k| k, 1.0, 3.0, 1.0)
    }

    #[test]
    fn radius_defaults() {
        assert_eq!(linear().radius_for(0.125).unwrap(), 6.0);
        assert!((linear().radius_for(0.7).unwrap() - 6.3).abs() < 1e-12);
        assert_eq!(linear().with_radius(2.5).radius_for(0.125).unwrap(), 2.5);
        let flat = EntryExitSpec::new(|_| 2.0, 1.0, 3.0, 1.0);
        assert!(flat.radius_for(0.1).is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(EntryExitSpec::new(|k| k, 3.0, 1.0, 1.0).validate().is_err());
        assert!(EntryExitSpec::new(|k| k, 1.0, 3.0, 0.0).validate().is_err());
        assert!(EntryExitSpec::new(|k| -k, 1.0, 3.0, 1.0).validate().is_err());
        assert!(EntryExitSpec::new(|k| -k, 1.0, 3.0, 1.0).waive_increasing_check().validate().is_ok());
    }

    #[test]
    fn flat_revenue_balances_exactly() {
        let spec = EntryExitSpec::new(|_| 2.0, 1.0, 3.0, 1.0).with_radius(2.0).waive_increasing_check();
        let f = solve_entry_exit_penalized(&spec, 0.125, 1e-3, StationaryOptions::default(), None).unwrap();
        assert!(f.last().iter().all(|u| (u - 2.0).abs() < 1e-12));
        let rep = verify_entry_exit(&f, &spec, 200, 1e-9, 3).unwrap();
        assert!(rep.passed, "{rep:?}");
        let rep = verify_entry_exit(&f, &EntryExitSpec { s: 1.9, ..spec.clone() }, 50, 1e-3, 3).unwrap();
        assert_eq!(rep.clause.as_deref(), Some("constraint"));
    }

    #[test]
    fn gradient_bound_of_linear_revenue() {
        assert!((linear().gradient_bound(6.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn penalty_excursions_shrink_with_eps() {
        let h = 0.125;
        let opts = StationaryOptions::default();
        let a = solve_entry_exit_penalized(&linear(), h, 0.02, opts, None).unwrap();
        let b = solve_entry_exit_penalized(&linear(), h, 0.01, opts, Some(a.last())).unwrap();
        let top = |f: &GridField| f.last().iter().fold(0.0_f64, |m, u| m.max(u - 3.0));
        let bottom = |f: &GridField| f.last().iter().fold(0.0_f64, |m, u| m.max(1.0 - u));
        for (x, y) in [(top(&a), top(&b)), (bottom(&a), bottom(&b))] {
            assert!(x > 0.0 && y > 0.0);
            let ratio = y / x;
            assert!((0.25..=1.0).contains(&ratio), "{ratio}");
        }
    }
}
