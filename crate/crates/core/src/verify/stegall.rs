//! Small linear perturbations that turn a minimum over grid nodes into a strict one.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::substream;

/// Draw budget before an objective is declared degenerate.
pub const MAX_DRAWS: usize = 64;
/// The radius halves after this many failed draws.
pub const HALVING_PERIOD: usize = 16;
/// Strictness threshold relative to the objective scale.
pub const STRICTNESS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StegallPerturbation {
    /// The shift, `|a| <= delta`.
    pub a: Vec<f64>,
    pub minimizer: usize,
    /// Second-best minus best perturbed value; always above the strictness threshold.
    pub margin: f64,
    /// Draws used, 1 when the first is accepted.
    pub draws: usize,
}

/// Uniform draw from the closed `delta`-ball in `R^d`.
pub fn draw_shift<R: Rng>(rng: &mut R, d: usize, delta: f64) -> Vec<f64> {
    let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let radius = delta * rng.random::<f64>().powf(1.0 / d as f64);
    g.into_iter().map(|v| v * radius / norm).collect()
}

/// Best node, and the gap to the runner-up.
pub fn strict_argmin(values: &[f64]) -> Option<(usize, f64)> {
    let mut best = (usize::MAX, f64::INFINITY);
    let mut second = f64::INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return None;
        }
        if v < best.1 {
            second = best.1;
            best = (i, v);
        } else if v < second {
            second = v;
        }
    }
    if best.0 == usize::MAX {
        return None;
    }
    // a single node is trivially strict
    let gap = if second.is_finite() { second - best.1 } else { f64::INFINITY };
    Some((best.0, gap))
}

fn scale_of(values: &[f64]) -> f64 {
    let s = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if s > 0.0 { s } else { 1.0 }
}

/// Repeats `shift -> objective` draws until the objective has a strict minimizer.
///
/// `objective(a, out)` fills the per-node values for the shift `a`. Draws come from
/// `rng` with radius `delta`, halved every [`HALVING_PERIOD`] failures.
pub(crate) fn search<F>(rng: &mut ChaCha8Rng, d: usize, delta: f64, mut objective: F) -> Result<StegallPerturbation>
where
    F: FnMut(&[f64], &mut Vec<f64>) -> Result<()>,
{
    let mut values = Vec::new();
    for draw in 0..MAX_DRAWS {
        let radius = delta * 0.5_f64.powi((draw / HALVING_PERIOD) as i32);
        let a = draw_shift(rng, d, radius);
        values.clear();
        objective(&a, &mut values)?;
        if values.is_empty() {
            return Err(Error::InvalidArgument("objective over an empty node set".into()));
        }
        if let Some((minimizer, margin)) = strict_argmin(&values) {
            if margin > STRICTNESS * scale_of(&values) {
                return Ok(StegallPerturbation {
                    a,
                    minimizer,
                    margin,
                    draws: draw + 1,
                });
            }
        }
    }
    Err(Error::Degenerate { attempts: MAX_DRAWS })
}

/// Perturbs `objective(x_n) + <a, x_n>` over the points (row-major, dimension `d`)
/// until its minimizer is unique.
pub fn stegall_perturb(objective: &[f64], points: &[f64], d: usize, delta: f64, seed: u64) -> Result<StegallPerturbation> {
    if objective.is_empty() || points.len() != objective.len() * d {
        return Err(Error::InvalidArgument(format!(
            "{} objective values for {} coordinates in dimension {d}",
            objective.len(),
            points.len()
        )));
    }
    if objective.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("objective has non-finite values".into()));
    }
    let mut rng = substream(seed, 0);
    search(&mut rng, d, delta, |a, out| {
        out.extend(
            objective
                .iter()
                .zip(points.chunks(d))
                .map(|(f, x)| f + a.iter().zip(x).map(|(ai, xi)| ai * xi).sum::<f64>()),
        );
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn unique_minimum_is_kept() {
        let pts = [0.0, 0.5, 1.0];
        let obj = [1.0, 0.0, 2.0];
        let s = stegall_perturb(&obj, &pts, 1, 1e-3, 7).unwrap();
        assert_eq!(s.minimizer, 1);
        assert_eq!(s.draws, 1);
        assert!(s.margin > 0.0);
    }

    #[test]
    fn tie_broken_by_shift_sign() {
        // nodes 0 and e_1 tied
        let pts = [0.0, 0.0, 0.25, 0.0, 0.0, 0.25];
        let obj = [0.0, 0.0, 1.0];
        let mut zero_wins = 0;
        for seed in 0..400 {
            let s = stegall_perturb(&obj, &pts, 2, 1e-2, seed).unwrap();
            if s.a[0] > 0.0 {
                assert_eq!(s.minimizer, 0);
            }
            zero_wins += usize::from(s.minimizer == 0);
        }
        assert!((150..=250).contains(&zero_wins), "{zero_wins}");
    }

    #[test]
    fn flat_objective_on_one_point_is_strict() {
        let s = stegall_perturb(&[3.0], &[0.0, 0.0], 2, 1e-3, 1).unwrap();
        assert_eq!(s.minimizer, 0);
    }

    #[test]
    fn shifts_stay_in_the_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = draw_shift(&mut rng, 3, 0.01);
            assert!(a.iter().map(|v| v * v).sum::<f64>().sqrt() <= 0.01 + 1e-15);
        }
    }

    #[test]
    fn degenerate_when_no_shift_can_help() {
        // identical points: no linear term can separate them
        let err = stegall_perturb(&[1.0, 1.0], &[0.5, 0.5], 1, 1e-3, 0).unwrap_err();
        assert!(matches!(err, Error::Degenerate { attempts: MAX_DRAWS }));
    }
}
