//! Seeded sample streams.
//!
//! Every sample index gets its own ChaCha stream derived from one seed, so a
//! sample's draws do not depend on which worker evaluates it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

/// Independent substream `index` of `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone)]
pub struct Sampler {
    pub seed: u64,
    pub n_samples: usize,
    /// Mass radius used for interior and boundary draws.
    pub radius: f64,
    /// Value vectors are drawn from `[-value_range, value_range]^d`.
    pub value_range: f64,
}

impl Sampler {
    pub fn new(seed: u64, n_samples: usize, radius: f64) -> Self {
        Self {
            seed,
            n_samples,
            radius,
            value_range: 2.0,
        }
    }

    pub fn with_value_range(mut self, range: f64) -> Self {
        self.value_range = range;
        self
    }

    pub fn rng(&self, index: usize) -> ChaCha8Rng {
        substream(self.seed, index as u64)
    }
}

/// Uniform draw from `{x >= 0, sum x <= radius}`.
pub fn point_in_simplex<R: Rng>(rng: &mut R, d: usize, radius: f64) -> Vec<f64> {
    let e: Vec<f64> = (0..=d).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    e[..d].iter().map(|v| radius * v / total).collect()
}

/// Simplex draw with a nonempty random set of coordinates forced to zero.
pub fn boundary_point<R: Rng>(rng: &mut R, d: usize, radius: f64) -> Vec<f64> {
    let mut x = point_in_simplex(rng, d, radius);
    let forced = rng.random_range(0..d);
    x[forced] = 0.0;
    for (i, xi) in x.iter_mut().enumerate() {
        if i != forced && rng.random_bool(0.25) {
            *xi = 0.0;
        }
    }
    x
}

/// Draw with `radius <= |x|_1 <= 2 radius`.
pub fn outer_point<R: Rng>(rng: &mut R, d: usize, radius: f64) -> Vec<f64> {
    let e: Vec<f64> = (0..d).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    let mass = radius * (1.0 + rng.random::<f64>());
    e.iter().map(|v| mass * v / total).collect()
}

pub fn value_vector<R: Rng>(rng: &mut R, d: usize, range: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-range..=range)).collect()
}

/// Uniform draw from the Euclidean ball of the given radius.
pub fn point_in_ball<R: Rng>(rng: &mut R, d: usize, radius: f64) -> Vec<f64> {
    let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let scale = radius * rng.random::<f64>().powf(1.0 / d as f64) / norm;
    g.iter().map(|v| v * scale).collect()
}

pub fn unit_vector<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return g.iter().map(|v| v / norm).collect();
        }
    }
}
