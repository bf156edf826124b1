//! Optimal stopping through penalization.
//!
//! The penalized equations add the reaction `(1/eps) U_+` and the transport
//! `(1/eps) beta'(U) * x`. As `eps -> 0` the solutions converge to a nonpositive
//! limit; `exit_set` and `post_exit_state` describe the population jump it induces.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gradient, Engine, Grid, GridField, Penalty, StationaryOptions, TdOptions};
use crate::model::{OrthantPoint, ModelSpec};
use crate::numerics::sup_norm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingConfig {
    /// Strictly decreasing penalty levels.
    pub schedule: Vec<f64>,
    /// Subgradient of the positive part chosen at zero, in `[0, 1]`.
    pub beta_prime_at_zero: f64,
}

impl Default for StoppingConfig {
    /// `1, 1/2, ..., 2^-14`.
    fn default() -> Self {
        Self::geometric(1.0, 1e-4)
    }
}

impl StoppingConfig {
    /// Ratio-1/2 schedule from `first` down to the first level `<= last`.
    pub fn geometric(first: f64, last: f64) -> Self {
        let mut schedule = vec![first];
        while *schedule.last().expect("nonempty") > last && schedule.len() < 200 {
            schedule.push(schedule.last().expect("nonempty") * 0.5);
        }
        Self {
            schedule,
            beta_prime_at_zero: 0.0,
        }
    }

    pub fn with_beta_prime_at_zero(mut self, b: f64) -> Self {
        self.beta_prime_at_zero = b;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.is_empty() || s.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(Error::InvalidArgument("eps schedule must be nonempty and positive".into()));
        }
        if s.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument("eps schedule must be strictly decreasing".into()));
        }
        if s[s.len() - 1] > 1e-4 * s[0] {
            return Err(Error::InvalidArgument(format!(
                "eps schedule must end at or below 1e-4 times its first entry ({} > {})",
                s[s.len() - 1],
                1e-4 * s[0]
            )));
        }
        if !(0.0..=1.0).contains(&self.beta_prime_at_zero) {
            return Err(Error::InvalidArgument(format!(
                "beta'(0) must lie in [0, 1], got {}",
                self.beta_prime_at_zero
            )));
        }
        Ok(())
    }

    pub fn last_eps(&self) -> f64 {
        *self.schedule.last().expect("validated schedule")
    }
}

/// Subgradient selection of the positive part.
pub fn beta_prime(u: f64, at_zero: f64) -> f64 {
    if u > 0.0 {
        1.0
    } else if u < 0.0 {
        0.0
    } else {
        at_zero
    }
}

struct StoppingPenalty {
    inv_eps: f64,
    beta0: f64,
}

impl Penalty for StoppingPenalty {
    fn inv_eps(&self) -> f64 {
        self.inv_eps
    }

    fn add_velocity(&self, _node: usize, x: &[f64], u: &[f64], v: &mut [f64]) {
        for j in 0..v.len() {
            v[j] += self.inv_eps * beta_prime(u[j], self.beta0) * x[j];
        }
    }

    fn obstacle(&self, _node: usize, _comp: usize, _u: &[f64]) -> Option<f64> {
        Some(0.0)
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")))
    }
}

/// Stationary penalized stopping equation, optionally warm-started.
pub fn solve_penalized_stationary(
    spec: &ModelSpec,
    grid: &Arc<Grid>,
    eps: f64,
    beta_prime_at_zero: f64,
    opts: StationaryOptions,
    start: Option<&[f64]>,
) -> Result<GridField> {
    check_eps(eps)?;
    spec.require_discount()?;
    let engine = Engine::new(spec, grid, None, "stopping")?;
    if !opts.force {
        crate::grid::solve::screen(spec, grid, "stopping", true)?;
    }
    let mut pen = StoppingPenalty {
        inv_eps: 1.0 / eps,
        beta0: beta_prime_at_zero,
    };
    let u0 = start.map_or_else(|| vec![0.0; grid.len() * grid.dim()], <[f64]>::to_vec);
    let u = engine.relax(u0, Some(&mut pen), opts.relax())?;
    GridField::new(grid.clone(), vec![0.0], vec![u])
}

/// Time-dependent penalized stopping equation from the unclipped `U0`.
pub fn solve_penalized_td(
    spec: &ModelSpec,
    grid: &Arc<Grid>,
    eps: f64,
    t_f: f64,
    dt: f64,
    beta_prime_at_zero: f64,
    opts: TdOptions,
) -> Result<GridField> {
    check_eps(eps)?;
    let engine = Engine::new(spec, grid, None, "stopping")?;
    if !opts.force {
        crate::grid::solve::screen(spec, grid, "stopping", false)?;
    }
    let pen = StoppingPenalty {
        inv_eps: 1.0 / eps,
        beta0: beta_prime_at_zero,
    };
    let start = crate::grid::solve::initial_slice(spec, grid)?;
    crate::grid::solve::march(&engine, grid.clone(), start, t_f, dt, Some(&pen), opts)
}

/// Per-level data of an eps continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationLevel {
    pub eps: f64,
    pub max_positive_part: f64,
    pub grad_norm: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationCertificate {
    pub levels: Vec<ContinuationLevel>,
    /// Least-squares slope of `max U_+` against `eps` over the second half of the schedule.
    pub slope: f64,
    /// Spread of `max U_+ / eps` over the fitted levels.
    pub ratio_spread: f64,
    /// Largest relative change of the gradient norm between any two levels.
    pub grad_variation: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ContinuationResult {
    pub field: GridField,
    pub certificate: ContinuationCertificate,
}

/// Solves the penalized stationary problem along the schedule, each level warm-started
/// from the previous one, and returns the last level with its certificate.
pub fn continuation_limit(
    spec: &ModelSpec,
    grid: &Arc<Grid>,
    config: &StoppingConfig,
    opts: StationaryOptions,
) -> Result<ContinuationResult> {
    config.validate()?;
    let mut levels = Vec::with_capacity(config.schedule.len());
    let mut current: Option<GridField> = None;
    let mut opts = opts;
    for &eps in &config.schedule {
        let field = solve_penalized_stationary(
            spec,
            grid,
            eps,
            config.beta_prime_at_zero,
            opts,
            current.as_ref().map(GridField::last),
        )?;
        opts.force = true;
        let engine = Engine::new(spec, grid, None, "stopping")?;
        let pen = StoppingPenalty {
            inv_eps: 1.0 / eps,
            beta0: config.beta_prime_at_zero,
        };
        let residual = sup_norm(&engine.stationary_residual(field.last(), Some(&pen))?);
        levels.push(ContinuationLevel {
            eps,
            max_positive_part: field.last().iter().fold(0.0_f64, |m, v| m.max(*v)),
            grad_norm: gradient(&field, 0).max_norm,
            residual,
        });
        current = Some(field);
    }
    let certificate = certify(levels);
    Ok(ContinuationResult {
        field: current.expect("validated schedule is nonempty"),
        certificate,
    })
}

fn certify(levels: Vec<ContinuationLevel>) -> ContinuationCertificate {
    let tail = &levels[levels.len() / 2..];
    let (sxy, sxx) = tail
        .iter()
        .fold((0.0, 0.0), |(a, b), l| (a + l.eps * l.max_positive_part, b + l.eps * l.eps));
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let ratios: Vec<f64> = tail
        .iter()
        .filter(|l| l.max_positive_part > 0.0)
        .map(|l| l.max_positive_part / l.eps)
        .collect();
    let ratio_spread = match (
        ratios.iter().copied().fold(f64::INFINITY, f64::min),
        ratios.iter().copied().fold(0.0, f64::max),
    ) {
        (lo, hi) if lo.is_finite() && lo > 0.0 => hi / lo,
        _ => 1.0,
    };
    let gmax = levels.iter().map(|l| l.grad_norm).fold(0.0, f64::max);
    let gmin = levels.iter().map(|l| l.grad_norm).fold(f64::INFINITY, f64::min);
    let grad_variation = if gmax > 0.0 { (gmax - gmin) / gmax } else { 0.0 };
    let warning = (ratio_spread > 3.0).then(|| {
        format!("continuation suspect: max U_+ / eps varies by a factor {ratio_spread:.2} over the fitted levels")
    });
    ContinuationCertificate {
        levels,
        slope,
        ratio_spread,
        grad_variation,
        warning,
    }
}

/// States where the (nonpositive) value touches zero: `{ i : U^i(x) >= -tol }`,
/// read from the last slice.
pub fn exit_set(field: &GridField, x: &[f64], tol: f64) -> Result<Vec<usize>> {
    let u = field.interpolate(field.n_slices() - 1, x)?;
    Ok((0..u.len()).filter(|&i| u[i] >= -tol).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostExit {
    pub state: OrthantPoint,
    pub exit_set: Vec<usize>,
    /// Residual of the three defining conditions at `state`.
    pub residual: f64,
    /// The pure-strategy candidate: every exiting state emptied.
    pub pure_candidate: Vec<f64>,
    pub pure_residual: f64,
    pub pure_coincides: bool,
}

/// The post-exit distribution `y`: `y^i = x^i` off `I(x)`, `U(y) = U(x)`, and
/// `G^i(y, U(y)) y^i = 0` on `I(x)`.
///
/// Solved by projected Levenberg-Marquardt on the `I(x)` coordinates in `[0, x^i]`
/// from three starts; distinct converged answers are reported as ambiguous.
pub fn post_exit_state(spec: &ModelSpec, field: &GridField, x: &OrthantPoint, tol: f64) -> Result<PostExit> {
    let d = spec.dim();
    if x.dim() != d || field.grid().dim() != d {
        return Err(Error::InvalidArgument("dimension mismatch between model, field and point".into()));
    }
    let xs = x.as_slice();
    let set = exit_set(field, xs, tol)?;
    let slice = field.n_slices() - 1;
    let ux = field.interpolate(slice, xs)?;
    if set.is_empty() {
        return Ok(PostExit {
            state: x.clone(),
            exit_set: set,
            residual: 0.0,
            pure_candidate: xs.to_vec(),
            pure_residual: 0.0,
            pure_coincides: true,
        });
    }
    let embed = |z: &[f64]| {
        let mut y = xs.to_vec();
        for (k, &i) in set.iter().enumerate() {
            y[i] = z[k];
        }
        y
    };
    let residual = |z: &[f64]| -> Result<Vec<f64>> {
        let y = embed(z);
        let uy = field.interpolate(slice, &y)?;
        let mut g = vec![0.0; d];
        spec.drift_into(&y, &uy, &mut g);
        crate::model::check_finite("G", &g, &y, &uy)?;
        let mut r: Vec<f64> = uy.iter().zip(&ux).map(|(a, b)| a - b).collect();
        r.extend(set.iter().map(|&i| g[i] * y[i]));
        Ok(r)
    };
    let upper: Vec<f64> = set.iter().map(|&i| xs[i]).collect();
    let starts = [
        upper.clone(),
        vec![0.0; set.len()],
        upper.iter().map(|u| 0.5 * u).collect::<Vec<_>>(),
    ];
    let mut found: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut best_failed = f64::INFINITY;
    for start in starts {
        match levenberg_marquardt(&residual, start, &upper, tol)? {
            Ok(sol) => found.push(sol),
            Err(res) => best_failed = best_failed.min(res),
        }
    }
    let Some((z, res)) = found.first().cloned() else {
        return Err(Error::NonConvergence {
            module: "post_exit_state",
            iterations: LM_MAX_ITER,
            residual: best_failed,
        });
    };
    for (other, _) in &found[1..] {
        if sup_norm(&z.iter().zip(other).map(|(a, b)| a - b).collect::<Vec<_>>()) > 10.0 * tol {
            return Err(Error::Ambiguous {
                first: embed(&z),
                second: embed(other),
            });
        }
    }
    let state = embed(&z);
    let pure_z = vec![0.0; set.len()];
    let pure_candidate = embed(&pure_z);
    let pure_residual = sup_norm(&residual(&pure_z)?);
    let pure_coincides = sup_norm(&z) <= 10.0 * tol;
    Ok(PostExit {
        state: OrthantPoint::new(state)?,
        exit_set: set,
        residual: res,
        pure_candidate,
        pure_residual,
        pure_coincides,
    })
}

const LM_MAX_ITER: usize = 400;

/// Box-projected Levenberg-Marquardt on `[0, upper]`. The outer `Result` carries model
/// errors; the inner one is `Err(best residual)` on nonconvergence.
#[allow(clippy::type_complexity)]
fn levenberg_marquardt<R>(residual: &R, mut z: Vec<f64>, upper: &[f64], tol: f64) -> Result<Result<(Vec<f64>, f64), f64>>
where
    R: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = z.len();
    let mut r = residual(&z)?;
    let mut norm = sup_norm(&r);
    let mut mu = 1e-3;
    let scale = upper.iter().copied().fold(1e-3, f64::max);
    for _ in 0..LM_MAX_ITER {
        if norm <= tol {
            return Ok(Ok((z, norm)));
        }
        let m = r.len();
        let mut jac = nalgebra::DMatrix::zeros(m, n);
        for j in 0..n {
            let step = 1e-7 * scale;
            let mut zp = z.clone();
            let (lo, hi) = if z[j] + step <= upper[j] { (z[j], z[j] + step) } else { (z[j] - step, z[j]) };
            zp[j] = hi;
            let rp = residual(&zp)?;
            zp[j] = lo;
            let rm = residual(&zp)?;
            for i in 0..m {
                jac[(i, j)] = (rp[i] - rm[i]) / (hi - lo);
            }
        }
        let rv = nalgebra::DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * rv;
        let mut improved = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += mu * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = a.lu().solve(&(-&jtr)) else {
                mu *= 10.0;
                continue;
            };
            let trial: Vec<f64> = (0..n).map(|i| (z[i] + step[i]).clamp(0.0, upper[i])).collect();
            let rt = residual(&trial)?;
            let nt = sup_norm(&rt);
            let cost = |v: &[f64]| v.iter().map(|c| c * c).sum::<f64>();
            if cost(&rt) < cost(&r) || nt < norm {
                z = trial;
                r = rt;
                norm = nt;
                mu = (mu * 0.3).max(1e-12);
                improved = true;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok(if norm <= tol { Ok((z, norm)) } else { Err(norm) })
}
