//! Pairwise monotonicity of a tabulated field and the gradient certificate.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gradient, GridField};
use crate::hypotheses::lipschitz_estimates;
use crate::model::ModelSpec;
use crate::numerics::spectral_norm;
use crate::sampling::{substream, unit_vector, Sampler};

/// Above this many pairs the monitor subsamples.
pub const PAIR_CAP: usize = 10_000_000;

const MONITOR_SEED: u64 = 0x6d6f6e;
const CERTIFICATE_SEED: u64 = 0x6265726e;
const CERTIFICATE_DIRECTIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorReport {
    /// Minimum of `<U(x) - U(y), x - y>` over the pairs examined; at most 0 (diagonal).
    pub min: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub pairs: usize,
    /// Set when the pair count exceeded [`PAIR_CAP`] and a seeded subsample was used.
    pub subsampled: bool,
}

fn pair_value(a: &GridField, sa: usize, b: &GridField, sb: usize, i: usize, j: usize) -> f64 {
    let grid = a.grid();
    let (x, y) = (grid.node(i), grid.node(j));
    let (u, v) = (a.value(sa, i), b.value(sb, j));
    (0..x.len()).map(|k| (u[k] - v[k]) * (x[k] - y[k])).sum()
}

/// `(value, i, j)` with ties broken by index so the reduction order does not matter.
fn better(p: (f64, usize, usize), q: (f64, usize, usize)) -> (f64, usize, usize) {
    if q.0 < p.0 || (q.0 == p.0 && (q.1, q.2) < (p.1, p.2)) {
        q
    } else {
        p
    }
}

fn scan(a: &GridField, sa: usize, b: &GridField, sb: usize, symmetric: bool) -> MonitorReport {
    let grid = a.grid();
    let n = grid.len();
    let total = if symmetric { n * (n + 1) / 2 } else { n * n };
    let start = (0.0, 0usize, 0usize);
    let (best, pairs, subsampled) = if total <= PAIR_CAP {
        let best = (0..n)
            .into_par_iter()
            .map(|i| {
                let lo = if symmetric { i } else { 0 };
                (lo..n).map(|j| (pair_value(a, sa, b, sb, i, j), i, j)).fold((f64::INFINITY, i, lo), better)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(start, better);
        (best, total, false)
    } else {
        let chunks = 64;
        let per = PAIR_CAP / chunks;
        let best = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = substream(MONITOR_SEED, c as u64);
                (0..per)
                    .map(|_| {
                        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
                        (pair_value(a, sa, b, sb, i, j), i, j)
                    })
                    .fold((f64::INFINITY, 0, 0), better)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(start, better);
        (best, per * chunks, true)
    };
    MonitorReport {
        min: best.0,
        x: grid.node(best.1).to_vec(),
        y: grid.node(best.2).to_vec(),
        pairs,
        subsampled,
    }
}

/// Minimum over node pairs of `W(x, y) = <U(x) - U(y), x - y>`; nonnegative for a monotone field.
pub fn monotonicity_monitor(field: &GridField, slice: usize) -> MonitorReport {
    scan(field, slice, field, slice, true)
}

/// Minimum over node pairs of `<U1(x) - U2(y), x - y>` for two fields on the same grid.
pub fn cross_monotonicity(a: &GridField, sa: usize, b: &GridField, sb: usize) -> Result<MonitorReport> {
    let (ga, gb) = (a.grid(), b.grid());
    if ga.dim() != gb.dim() || ga.len() != gb.len() || ga.spacing() != gb.spacing() {
        return Err(Error::InvalidArgument("cross monitor needs fields on the same grid".into()));
    }
    Ok(scan(a, sa, b, sb, false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCertificate {
    pub beta: f64,
    /// `min <xi, A xi> - beta |A^T xi|^2` over nodes and directions, `A` the difference gradient.
    pub min_z: f64,
    pub node: usize,
    /// `1 / beta`, valid as a gradient bound when `certified`.
    pub bound: f64,
    pub certified: bool,
    /// Largest difference-gradient norm actually observed.
    pub observed: f64,
}

/// Certificate for a given `beta`, over every node and 100 seeded unit directions.
pub fn bernstein_certificate(field: &GridField, slice: usize, beta: f64) -> LipschitzCertificate {
    let d = field.grid().dim();
    let grad = gradient(field, slice);
    let dirs: Vec<Vec<f64>> = (0..CERTIFICATE_DIRECTIONS)
        .map(|k| unit_vector(&mut substream(CERTIFICATE_SEED, k as u64), d))
        .collect();
    let (min_z, node) = grad
        .matrices
        .par_iter()
        .enumerate()
        .map(|(n, a)| {
            let z = dirs
                .iter()
                .map(|xi| {
                    let x = nalgebra::DVector::from_column_slice(xi);
                    let ax = a * &x;
                    let atx = a.transpose() * &x;
                    x.dot(&ax) - beta * atx.norm_squared()
                })
                .fold(f64::INFINITY, f64::min);
            (z, n)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((f64::INFINITY, 0), |b, c| if c.0 < b.0 { c } else { b });
    let scale = grad.max_norm.max(1.0);
    LipschitzCertificate {
        beta,
        min_z,
        node,
        bound: 1.0 / beta,
        certified: min_z >= -1e-12 * scale,
        observed: grad.max_norm,
    }
}

/// Certificate with `beta(t) = alpha exp(-t (2|D_x F| + 2|D_x G| + lambda (|T| - 1)_+))`,
/// the Lipschitz constants sampled from the model.
pub fn lipschitz_certificate(field: &GridField, slice: usize, spec: &ModelSpec, alpha: f64, t: f64) -> LipschitzCertificate {
    let (lf, lg) = lipschitz_estimates(spec, &Sampler::new(CERTIFICATE_SEED, 256, field.grid().radius()));
    let noise = spec.lambda * (spectral_norm(&spec.noise_map) - 1.0).max(0.0);
    let beta = alpha * (-t * (2.0 * lf + 2.0 * lg + noise)).exp();
    bernstein_certificate(field, slice, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use std::sync::Arc;

    fn field(d: usize, f: impl Fn(&[f64], &mut [f64])) -> GridField {
        GridField::from_fn(Arc::new(Grid::new(d, 1.0, 0.125).unwrap()), f).unwrap()
    }

    #[test]
    fn identity_field_is_monotone() {
        let rep = monotonicity_monitor(&field(2, |x, o| o.copy_from_slice(x)), 0);
        assert_eq!(rep.min, 0.0);
        assert_eq!(rep.x, rep.y);
        assert!(!rep.subsampled);
    }

    #[test]
    fn reversed_field_is_flagged() {
        let rep = monotonicity_monitor(&field(1, |x, o| o[0] = -x[0]), 0);
        assert!((rep.min + 1.0).abs() < 1e-12);
        assert!((rep.x[0] - rep.y[0]).abs() == 1.0);
    }

    #[test]
    fn monitor_matches_brute_force() {
        let f = field(2, |x, o| {
            o[0] = x[0] - x[1] * x[1];
            o[1] = (3.0 * x[0]).sin();
        });
        let g = f.grid();
        let mut brute = f64::INFINITY;
        for i in 0..g.len() {
            for j in 0..g.len() {
                brute = brute.min(pair_value(&f, 0, &f, 0, i, j));
            }
        }
        assert_eq!(monotonicity_monitor(&f, 0).min, brute);
    }

    #[test]
    fn cross_monitor_of_identical_fields_equals_monitor() {
        let f = field(2, |x, o| {
            o[0] = 2.0 * x[0];
            o[1] = x[1] - 0.5 * x[0];
        });
        assert_eq!(cross_monotonicity(&f, 0, &f, 0).unwrap().min, monotonicity_monitor(&f, 0).min);
    }

    #[test]
    fn certificate_examples() {
        let c = bernstein_certificate(&field(2, |_, o| o.fill(3.0)), 0, 1.0);
        assert_eq!(c.min_z, 0.0);
        assert!(c.certified);
        let id = field(2, |x, o| o.copy_from_slice(x));
        let c = bernstein_certificate(&id, 0, 0.5);
        assert!((c.min_z - 0.5).abs() < 1e-12);
        assert!(c.certified && c.bound == 2.0 && c.bound >= c.observed);
        let c = bernstein_certificate(&id, 0, 2.0);
        assert!((c.min_z + 1.0).abs() < 1e-12);
        assert!(!c.certified);
    }
}
