//! Upwind discretization shared by every grid solver.
//!
//! Transport `(v . grad) U` at a node is written as `sum_s w_s (U(x) - U(x + h s)) / h`
//! with `sum_s w_s s = -v`, so nonnegative weights read values from upstream.

use rayon::prelude::*;

use super::{combine, Grid};
use crate::error::{Error, Result};
use crate::model::{check_finite, ModelSpec};

/// Smooth bounded diffusion profile `sigma(x) = x^2 s^2 / (x^2 + s^2)`, quadratic near 0.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Viscosity {
    pub eps: f64,
    pub s: f64,
}

impl Viscosity {
    pub fn sigma(&self, x: f64) -> f64 {
        let (x2, s2) = (x * x, self.s * self.s);
        x2 * s2 / (x2 + s2)
    }

    pub fn dsigma(&self, x: f64) -> f64 {
        let (x2, s2) = (x * x, self.s * self.s);
        2.0 * x * s2 * s2 / ((x2 + s2) * (x2 + s2))
    }
}

/// Stiff penalization hooks. The reaction `(1/eps)(U^c - obstacle)_+` is applied
/// implicitly per node and component; extra transport joins the upwind velocity.
pub(crate) trait Penalty: Sync {
    /// Called once per sweep before any node is updated.
    fn refresh(&mut self, _grid: &Grid, _u: &[f64]) -> Result<()> {
        Ok(())
    }

    fn inv_eps(&self) -> f64;

    fn add_velocity(&self, node: usize, x: &[f64], u: &[f64], v: &mut [f64]);

    /// Upper obstacle for component `comp` at a node, or `None` if unconstrained.
    fn obstacle(&self, node: usize, comp: usize, u: &[f64]) -> Option<f64>;
}

/// Upwind weights for velocity `v` at `node`; returns `sum |w|`.
///
/// At the face `sum x = R` a missing `+e_i` is supplied by the diagonal `e_i - e_j`
/// from axes with `v_j > 0`. When no such axis is left (the velocity points out of
/// the domain), the one-sided difference toward the interior is used with a
/// negative weight.
pub(crate) fn upwind_stencil(grid: &Grid, node: usize, v: &[f64], out: &mut Vec<(usize, f64)>) -> f64 {
    out.clear();
    let d = grid.dim();
    let face = grid.on_face(node);
    if !face {
        for i in 0..d {
            let vi = v[i];
            if vi > 0.0 {
                match (grid.minus(node, i), grid.plus(node, i)) {
                    (Some(m), _) => out.push((m, vi)),
                    (None, Some(p)) => out.push((p, -vi)),
                    _ => {}
                }
            } else if vi < 0.0 {
                if let Some(p) = grid.plus(node, i) {
                    out.push((p, -vi));
                }
            }
        }
    } else {
        let k = grid.lattice(node);
        let mut cap: Vec<f64> = (0..d)
            .map(|j| if v[j] > 0.0 && k[j] > 0 { v[j] } else { 0.0 })
            .collect();
        let mut probe = k.to_vec();
        for i in 0..d {
            if v[i] >= 0.0 {
                continue;
            }
            let mut rem = -v[i];
            for j in 0..d {
                if rem <= 0.0 {
                    break;
                }
                if j == i || cap[j] <= 0.0 {
                    continue;
                }
                let m = rem.min(cap[j]);
                probe[i] += 1;
                probe[j] -= 1;
                if let Some(nb) = grid.index_of(&probe) {
                    out.push((nb, m));
                    rem -= m;
                    cap[j] -= m;
                }
                probe[i] -= 1;
                probe[j] += 1;
            }
            if rem > 0.0 {
                if let Some(mn) = grid.minus(node, i) {
                    out.push((mn, -rem));
                }
            }
        }
        for j in 0..d {
            if cap[j] > 0.0 {
                if let Some(mn) = grid.minus(node, j) {
                    out.push((mn, cap[j]));
                }
            } else if v[j] > 0.0 && k[j] == 0 {
                // outward flux at a corner of the face; nothing upstream exists
            }
        }
    }
    out.iter().map(|(_, w)| w.abs()).sum()
}

struct Scratch {
    p: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    v: Vec<f64>,
    vc: Vec<f64>,
    stencil: Vec<(usize, f64)>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self {
            p: vec![0.0; d],
            f: vec![0.0; d],
            g: vec![0.0; d],
            v: vec![0.0; d],
            vc: vec![0.0; d],
            stencil: Vec::with_capacity(2 * d),
        }
    }
}

/// Per-node stability data: transport speed plus jump rate, and diffusion number.
#[derive(Debug, Clone, Copy, Default)]
struct Speeds {
    hyper: f64,
    parabolic: f64,
}

impl Speeds {
    fn max(self, o: Self) -> Self {
        Self {
            hyper: self.hyper.max(o.hyper),
            parabolic: self.parabolic.max(o.parabolic),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct RelaxOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub window: usize,
    pub cfl: f64,
}

pub(crate) struct Engine<'a> {
    pub spec: &'a ModelSpec,
    pub grid: &'a Grid,
    noise: Option<Vec<Vec<(usize, f64)>>>,
    visc: Option<Viscosity>,
    module: &'static str,
}

impl<'a> Engine<'a> {
    pub fn new(spec: &'a ModelSpec, grid: &'a Grid, visc: Option<Viscosity>, module: &'static str) -> Result<Self> {
        spec.validate()?;
        if spec.dim() != grid.dim() {
            return Err(Error::InvalidArgument(format!(
                "model has {} states but grid has dimension {}",
                spec.dim(),
                grid.dim()
            )));
        }
        let noise = if spec.lambda > 0.0 {
            let weights = (0..grid.len())
                .into_par_iter()
                .map(|n| {
                    let tx = spec.noise_apply(grid.node(n));
                    let mut w = Vec::new();
                    grid.interpolation_weights(&tx, &mut w).map(|_| w)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::Domain(msg) => Error::Domain(format!("common noise maps a node outside the grid: {msg}")),
                    other => other,
                })?;
            Some(weights)
        } else {
            None
        };
        Ok(Self {
            spec,
            grid,
            noise,
            visc: visc.filter(|v| v.eps > 0.0),
            module,
        })
    }

    /// Explicit rate `G - (v . grad) U - lambda (U - T* U(Tx)) + diffusion` at one node.
    fn node_rates(
        &self,
        u: &[f64],
        node: usize,
        penalty: Option<&dyn Penalty>,
        sc: &mut Scratch,
        out: &mut [f64],
    ) -> Result<Speeds> {
        let d = self.grid.dim();
        let h = self.grid.spacing();
        let x = self.grid.node(node);
        let un = &u[node * d..(node + 1) * d];
        sc.p.copy_from_slice(un);
        self.spec.dynamics_into(x, &sc.p, &mut sc.f);
        self.spec.drift_into(x, &sc.p, &mut sc.g);
        check_finite("F", &sc.f, x, &sc.p)?;
        check_finite("G", &sc.g, x, &sc.p)?;
        sc.v.copy_from_slice(&sc.f);
        if let Some(pen) = penalty {
            pen.add_velocity(node, x, un, &mut sc.v);
        }
        out.copy_from_slice(&sc.g);

        let mut speeds = Speeds::default();
        match self.visc {
            None => {
                let total = upwind_stencil(self.grid, node, &sc.v, &mut sc.stencil);
                speeds.hyper = total / h;
                for &(nb, w) in &sc.stencil {
                    let unb = &u[nb * d..(nb + 1) * d];
                    for c in 0..d {
                        out[c] -= w * (un[c] - unb[c]) / h;
                    }
                }
            }
            Some(visc) => {
                for c in 0..d {
                    sc.vc.copy_from_slice(&sc.v);
                    sc.vc[c] -= visc.eps * visc.dsigma(x[c]);
                    let total = upwind_stencil(self.grid, node, &sc.vc, &mut sc.stencil);
                    speeds.hyper = speeds.hyper.max(total / h);
                    for &(nb, w) in &sc.stencil {
                        out[c] -= w * (un[c] - u[nb * d + c]) / h;
                    }
                }
                let mut smax = 0.0_f64;
                for j in 0..d {
                    let sig = visc.sigma(x[j]);
                    smax = smax.max(sig);
                    if sig == 0.0 {
                        continue;
                    }
                    let second = |c: usize| -> f64 {
                        let at = |n: usize| u[n * d + c];
                        match (self.grid.plus(node, j), self.grid.minus(node, j)) {
                            (Some(p), Some(m)) => at(p) - 2.0 * at(node) + at(m),
                            (None, Some(m)) => match self.grid.minus(m, j) {
                                Some(mm) => at(node) - 2.0 * at(m) + at(mm),
                                None => 0.0,
                            },
                            _ => 0.0,
                        }
                    };
                    for (c, o) in out.iter_mut().enumerate() {
                        *o += visc.eps * sig * second(c) / (h * h);
                    }
                }
                speeds.parabolic = visc.eps * smax / (h * h);
            }
        }

        if let Some(weights) = &self.noise {
            let lambda = self.spec.lambda;
            let utx = combine(u, d, &weights[node]);
            let t = &self.spec.noise_map;
            for c in 0..d {
                let adj: f64 = (0..d).map(|j| t[(j, c)] * utx[j]).sum();
                out[c] -= lambda * (un[c] - adj);
            }
            speeds.hyper += 2.0 * lambda;
        }
        Ok(speeds)
    }

    /// One explicit Euler step `u -> next`, with the penalty reaction implicit.
    pub fn step(
        &self,
        u: &[f64],
        dt: f64,
        time: f64,
        penalty: Option<&dyn Penalty>,
        cfl: f64,
        next: &mut [f64],
    ) -> Result<()> {
        let d = self.grid.dim();
        let speeds = next
            .par_chunks_mut(d)
            .enumerate()
            .map_init(
                || Scratch::new(d),
                |sc, (node, out)| -> Result<Speeds> {
                    let s = self.node_rates(u, node, penalty, sc, out)?;
                    let un = &u[node * d..(node + 1) * d];
                    for c in 0..d {
                        let mut val = un[c] + dt * out[c];
                        if let Some(pen) = penalty {
                            if let Some(ob) = pen.obstacle(node, c, un) {
                                if val > ob {
                                    let k = dt * pen.inv_eps();
                                    val = (val + k * ob) / (1.0 + k);
                                }
                            }
                        }
                        out[c] = val;
                    }
                    Ok(s)
                },
            )
            .try_reduce(Speeds::default, |a, b| Ok(a.max(b)))?;
        let number = dt * speeds.hyper;
        if number > cfl * (1.0 + 1e-12) {
            return Err(Error::Cfl {
                module: self.module,
                number,
                limit: cfl,
            });
        }
        let parabolic = dt * speeds.parabolic;
        if parabolic > 0.45 * (1.0 + 1e-12) {
            return Err(Error::Cfl {
                module: self.module,
                number: parabolic,
                limit: 0.45,
            });
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                module: self.module,
                time,
            });
        }
        Ok(())
    }

    /// False-transient iteration to the stationary equation with node-local pseudo-time
    /// steps `cfl / (speed + r)`. Returns the first iterate with sup residual `<= tol`.
    pub fn relax(
        &self,
        mut u: Vec<f64>,
        mut penalty: Option<&mut dyn Penalty>,
        opts: RelaxOptions,
    ) -> Result<Vec<f64>> {
        let d = self.grid.dim();
        let r = self.spec.discount;
        let mut next = vec![0.0; u.len()];
        let mut history: Vec<f64> = Vec::new();
        for it in 0..=opts.max_iter {
            if let Some(p) = penalty.as_deref_mut() {
                p.refresh(self.grid, &u)?;
            }
            let pen: Option<&dyn Penalty> = penalty.as_deref().map(|p| p as &dyn Penalty);
            let residual = next
                .par_chunks_mut(d)
                .enumerate()
                .map_init(
                    || (Scratch::new(d), vec![0.0; d]),
                    |(sc, rate), (node, out)| -> Result<f64> {
                        let s = self.node_rates(&u, node, pen, sc, rate)?;
                        let dtau = opts.cfl / (s.hyper + 4.0 * s.parabolic + r);
                        let un = &u[node * d..(node + 1) * d];
                        let mut res = 0.0_f64;
                        for c in 0..d {
                            let explicit = rate[c] - r * un[c];
                            let mut val = un[c] + dtau * explicit;
                            let mut pen_term = 0.0;
                            if let Some(p) = pen {
                                if let Some(ob) = p.obstacle(node, c, un) {
                                    pen_term = p.inv_eps() * (un[c] - ob).max(0.0);
                                    if val > ob {
                                        let k = dtau * p.inv_eps();
                                        val = (val + k * ob) / (1.0 + k);
                                    }
                                }
                            }
                            res = res.max((explicit - pen_term).abs());
                            out[c] = val;
                        }
                        Ok(res)
                    },
                )
                .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;
            if !residual.is_finite() {
                return Err(Error::BlowUp {
                    module: self.module,
                    time: it as f64,
                });
            }
            if residual <= opts.tol {
                return Ok(u);
            }
            history.push(residual);
            if history.len() > opts.window {
                let old = history[history.len() - 1 - opts.window];
                if residual > 0.1 * old {
                    return Err(Error::NonConvergence {
                        module: self.module,
                        iterations: it,
                        residual,
                    });
                }
            }
            std::mem::swap(&mut u, &mut next);
        }
        let residual = history.last().copied().unwrap_or(f64::NAN);
        Err(Error::NonConvergence {
            module: self.module,
            iterations: opts.max_iter,
            residual,
        })
    }

    /// Sup-norm stationary residual of a slice, penalty included.
    pub fn stationary_residual(&self, u: &[f64], penalty: Option<&dyn Penalty>) -> Result<Vec<f64>> {
        let d = self.grid.dim();
        let r = self.spec.discount;
        let mut out = vec![0.0; u.len()];
        out.par_chunks_mut(d)
            .enumerate()
            .try_for_each_init(
                || Scratch::new(d),
                |sc, (node, o)| -> Result<()> {
                    self.node_rates(u, node, penalty, sc, o)?;
                    let un = &u[node * d..(node + 1) * d];
                    for c in 0..d {
                        let mut pen_term = 0.0;
                        if let Some(p) = penalty {
                            if let Some(ob) = p.obstacle(node, c, un) {
                                pen_term = p.inv_eps() * (un[c] - ob).max(0.0);
                            }
                        }
                        o[c] = o[c] - r * un[c] - pen_term;
                    }
                    Ok(())
                },
            )?;
        Ok(out)
    }
}
