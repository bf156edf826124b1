//! Lattice discretization of the truncated simplex `{x >= 0, sum x <= R}` and
//! tabulated value fields on it.

mod io;
mod scheme;
pub(crate) mod solve;

pub use io::{field_to_csv, read_field, write_field_binary, write_field_csv, FieldHeader};
pub(crate) use scheme::{Engine, Penalty};
pub use solve::{
    gradient, solve_stationary, solve_stationary_with, solve_td, solve_td_with, solve_viscous, GradientField,
    StationaryOptions, TdOptions,
};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default upper bound on the number of nodes.
pub const DEFAULT_NODE_CAP: usize = 4_000_000;

/// Marker for a missing neighbor.
pub const NONE: usize = usize::MAX;

/// All points `h k` with `k` a nonnegative integer vector and `sum k <= N = R/h`,
/// in lexicographic order of `k`.
#[derive(Debug, Clone)]
pub struct Grid {
    d: usize,
    radius: f64,
    h: f64,
    n: usize,
    lattice: Vec<u32>,
    coords: Vec<f64>,
    plus: Vec<usize>,
    minus: Vec<usize>,
    /// `binom[m][b] = C(b + m, m)`: lattice points in `m` dimensions with sum at most `b`.
    binom: Vec<Vec<u64>>,
}

/// Number of lattice points with coordinate sum at most `n` in `d` dimensions, `C(n + d, d)`.
pub fn node_count(d: usize, n: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 1..=d as u128 {
        c = c.saturating_mul(n as u128 + i) / i;
    }
    c
}

impl Grid {
    pub fn new(d: usize, radius: f64, h: f64) -> Result<Self> {
        Self::with_cap(d, radius, h, DEFAULT_NODE_CAP)
    }

    pub fn with_cap(d: usize, radius: f64, h: f64, cap: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("grid dimension must be at least 1".into()));
        }
        if !(h > 0.0) || !(radius > 0.0) || !h.is_finite() || !radius.is_finite() {
            return Err(Error::InvalidArgument(format!("need h > 0 and R > 0, got h={h}, R={radius}")));
        }
        let ratio = radius / h;
        let n = ratio.round();
        if n < 1.0 || ((n * h - radius).abs() > 1e-12 * radius) {
            return Err(Error::InvalidArgument(format!("spacing {h} does not divide radius {radius}")));
        }
        let n = n as usize;
        let count = node_count(d, n);
        if count > cap as u128 {
            return Err(Error::Capacity { nodes: count, cap });
        }
        let count = count as usize;

        let binom: Vec<Vec<u64>> = (0..=d + 1)
            .map(|m| (0..=n + 1).map(|b| node_count(m, b) as u64).collect())
            .collect();

        let mut lattice = Vec::with_capacity(count * d);
        let mut k = vec![0u32; d];
        enumerate(&mut k, 0, n as u32, &mut lattice);
        debug_assert_eq!(lattice.len(), count * d);
        let coords = lattice.iter().map(|&k| k as f64 * h).collect();

        let mut grid = Self {
            d,
            radius,
            h,
            n,
            lattice,
            coords,
            plus: vec![NONE; count * d],
            minus: vec![NONE; count * d],
            binom,
        };
        let mut probe = vec![0u32; d];
        for node in 0..count {
            probe.copy_from_slice(grid.lattice(node));
            let sum: u32 = probe.iter().sum();
            for i in 0..d {
                if (sum as usize) < n {
                    probe[i] += 1;
                    grid.plus[node * d + i] = grid.rank(&probe);
                    probe[i] -= 1;
                }
                if probe[i] > 0 {
                    probe[i] -= 1;
                    grid.minus[node * d + i] = grid.rank(&probe);
                    probe[i] += 1;
                }
            }
        }
        Ok(grid)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// Lattice steps per unit of mass radius, `R / h`.
    pub fn steps(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn node(&self, index: usize) -> &[f64] {
        &self.coords[index * self.d..(index + 1) * self.d]
    }

    pub fn lattice(&self, index: usize) -> &[u32] {
        &self.lattice[index * self.d..(index + 1) * self.d]
    }

    pub fn plus(&self, index: usize, axis: usize) -> Option<usize> {
        let v = self.plus[index * self.d + axis];
        (v != NONE).then_some(v)
    }

    pub fn minus(&self, index: usize, axis: usize) -> Option<usize> {
        let v = self.minus[index * self.d + axis];
        (v != NONE).then_some(v)
    }

    /// Whether the node lies on the face `sum x = R`.
    pub fn on_face(&self, index: usize) -> bool {
        self.lattice(index).iter().sum::<u32>() as usize == self.n
    }

    /// Index of lattice point `k`, or `None` outside the grid.
    pub fn index_of(&self, k: &[u32]) -> Option<usize> {
        if k.len() != self.d || k.iter().map(|&c| c as usize).sum::<usize>() > self.n {
            return None;
        }
        Some(self.rank(k))
    }

    /// Lexicographic rank; `k` must be in the grid.
    fn rank(&self, k: &[u32]) -> usize {
        let d = self.d;
        let mut budget = self.n;
        let mut r: u64 = 0;
        for (i, &ki) in k.iter().enumerate() {
            let m = d - i - 1;
            let ki = ki as usize;
            // points whose i-th coordinate is below ki, given the prefix
            r += self.binom[m + 1][budget] - if ki <= budget { self.binom[m + 1][budget - ki] } else { 0 };
            budget -= ki;
        }
        r as usize
    }

    /// Piecewise-linear interpolation weights of `x` on lattice vertices.
    ///
    /// The cell `k = floor(x/h)` with fractional part `f` is split by systematic
    /// sampling: for `u` in `[0, 1)`, vertex `k + e_S(u)` where `i` is in `S(u)` iff an
    /// integer lies in `[C_{i-1} - u, C_i - u)`, `C_i = f_1 + .. + f_i`. Averaging over `u`
    /// reproduces affine functions exactly and every vertex satisfies
    /// `sum (k + e_S) <= ceil(sum x / h)`, so no vertex leaves the truncated simplex.
    pub fn interpolation_weights(&self, x: &[f64], out: &mut Vec<(usize, f64)>) -> Result<()> {
        out.clear();
        let d = self.d;
        if x.len() != d {
            return Err(Error::InvalidArgument(format!("point has length {}, expected {d}", x.len())));
        }
        let slack = 1e-9 * self.radius.max(1.0);
        let mass: f64 = x.iter().sum();
        if x.iter().any(|c| !(*c >= -slack) || !c.is_finite()) || mass > self.radius + slack {
            return Err(Error::Domain(format!(
                "point {x:?} lies outside the truncated simplex of radius {}",
                self.radius
            )));
        }
        let mut z: Vec<f64> = x.iter().map(|c| c.max(0.0) / self.h).collect();
        let zsum: f64 = z.iter().sum();
        if zsum > self.n as f64 {
            let s = self.n as f64 / zsum;
            z.iter_mut().for_each(|c| *c *= s);
        }
        let mut k = vec![0u32; d];
        let mut f = vec![0.0; d];
        for i in 0..d {
            let fl = z[i].floor();
            k[i] = fl as u32;
            f[i] = z[i] - fl;
        }
        let mut cum = vec![0.0; d + 1];
        for i in 0..d {
            cum[i + 1] = cum[i] + f[i];
        }
        let mut breaks: Vec<f64> = cum[1..].iter().map(|c| c - c.floor()).collect();
        breaks.push(0.0);
        breaks.push(1.0);
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        let mut vertex = k.clone();
        for w in breaks.windows(2) {
            let len = w[1] - w[0];
            if len <= 1e-14 {
                continue;
            }
            let u = 0.5 * (w[0] + w[1]);
            vertex.copy_from_slice(&k);
            for i in 0..d {
                if (cum[i + 1] - u).ceil() - (cum[i] - u).ceil() >= 1.0 {
                    vertex[i] += 1;
                }
            }
            let idx = match self.index_of(&vertex) {
                Some(idx) => idx,
                None => {
                    // rounding pushed the vertex over the face: drop its smallest increment
                    let j = (0..d)
                        .filter(|&j| vertex[j] > k[j])
                        .min_by(|&a, &b| f[a].total_cmp(&f[b]))
                        .ok_or_else(|| Error::Internal("interpolation vertex outside grid".into()))?;
                    vertex[j] -= 1;
                    self.index_of(&vertex)
                        .ok_or_else(|| Error::Internal("interpolation vertex outside grid".into()))?
                }
            };
            match out.iter_mut().find(|(n, _)| *n == idx) {
                Some(entry) => entry.1 += len,
                None => out.push((idx, len)),
            }
        }
        let total: f64 = out.iter().map(|(_, w)| w).sum();
        out.iter_mut().for_each(|(_, w)| *w /= total);
        Ok(())
    }
}

fn enumerate(k: &mut [u32], pos: usize, budget: u32, out: &mut Vec<u32>) {
    if pos == k.len() {
        out.extend_from_slice(k);
        return;
    }
    for v in 0..=budget {
        k[pos] = v;
        enumerate(k, pos + 1, budget - v, out);
    }
    k[pos] = 0;
}

/// Builds the lattice grid of the truncated simplex.
pub fn build_grid(d: usize, radius: f64, h: f64) -> Result<Grid> {
    Grid::new(d, radius, h)
}

/// Value field `U(t, x)` tabulated on a grid, one slice per stored time.
#[derive(Debug, Clone)]
pub struct GridField {
    grid: Arc<Grid>,
    times: Vec<f64>,
    /// Per slice, node-major `U`: entry `node * d + i`.
    values: Vec<Vec<f64>>,
}

impl GridField {
    pub fn new(grid: Arc<Grid>, times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        let expected = grid.len() * grid.dim();
        if times.len() != values.len() || times.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} times for {} slices",
                times.len(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|s| s.len() != expected) {
            return Err(Error::InvalidArgument(format!(
                "slice {bad} has {} entries, expected {expected}",
                values[bad].len()
            )));
        }
        for (s, slice) in values.iter().enumerate() {
            if let Some(pos) = slice.iter().position(|v| !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "slice {s} has a non-finite value at node {} component {}",
                    pos / grid.dim(),
                    pos % grid.dim()
                )));
            }
        }
        Ok(Self { grid, times, values })
    }

    /// Single-slice field from a map `x -> U(x)`.
    pub fn from_fn<F>(grid: Arc<Grid>, mut f: F) -> Result<Self>
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let d = grid.dim();
        let mut values = vec![0.0; grid.len() * d];
        for n in 0..grid.len() {
            f(grid.node(n), &mut values[n * d..(n + 1) * d]);
        }
        Self::new(grid, vec![0.0], vec![values])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_slices(&self) -> usize {
        self.values.len()
    }

    pub fn slice(&self, s: usize) -> &[f64] {
        &self.values[s]
    }

    pub fn last(&self) -> &[f64] {
        self.values.last().expect("fields have at least one slice")
    }

    pub fn value(&self, s: usize, node: usize) -> &[f64] {
        let d = self.grid.dim();
        &self.values[s][node * d..(node + 1) * d]
    }

    /// Field with only slice `s`.
    pub fn select(&self, s: usize) -> Self {
        Self {
            grid: self.grid.clone(),
            times: vec![self.times[s]],
            values: vec![self.values[s].clone()],
        }
    }

    pub fn into_slices(self) -> (Arc<Grid>, Vec<f64>, Vec<Vec<f64>>) {
        (self.grid, self.times, self.values)
    }

    pub fn interpolate(&self, s: usize, x: &[f64]) -> Result<Vec<f64>> {
        let mut w = Vec::new();
        self.grid.interpolation_weights(x, &mut w)?;
        Ok(combine(&self.values[s], self.grid.dim(), &w))
    }

    /// Sup-norm distance between two single slices after interpolating `other`
    /// onto this field's nodes.
    pub fn sup_distance(&self, s: usize, other: &GridField, t: usize) -> Result<f64> {
        let mut worst = 0.0_f64;
        for n in 0..self.grid.len() {
            let u = other.interpolate(t, self.grid.node(n))?;
            for (a, b) in self.value(s, n).iter().zip(&u) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }
}

pub(crate) fn combine(values: &[f64], d: usize, weights: &[(usize, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for &(node, w) in weights {
        for (o, v) in out.iter_mut().zip(&values[node * d..(node + 1) * d]) {
            *o += w * v;
        }
    }
    out
}

/// Scalar summary of a field slice for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

pub fn value_range(values: &[f64]) -> Range {
    values.iter().fold(
        Range {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        },
        |r, v| Range {
            min: r.min.min(*v),
            max: r.max.max(*v),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn node_counts() {
        let g = Grid::new(1, 1.0, 0.5).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.node(1), &[0.5]);
        assert_eq!(Grid::new(2, 1.0, 0.5).unwrap().len(), 6);
        assert_eq!(Grid::new(3, 2.0, 1.0).unwrap().len(), 10);
        assert_eq!(node_count(4, 16), 4845);
    }

    #[test]
    fn capacity_and_divisibility_errors() {
        assert!(matches!(Grid::with_cap(3, 1.0, 0.01, 1000), Err(Error::Capacity { .. })));
        assert!(matches!(Grid::new(2, 1.0, 0.3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ranks_match_enumeration_and_neighbors_are_consistent() {
        let g = Grid::new(3, 1.0, 0.25).unwrap();
        for n in 0..g.len() {
            assert_eq!(g.index_of(g.lattice(n)), Some(n));
            assert!(g.node(n).iter().sum::<f64>() <= 1.0 + 1e-12);
            for i in 0..3 {
                if let Some(p) = g.plus(n, i) {
                    assert_eq!(g.minus(p, i), Some(n));
                    assert_relative_eq!(g.node(p)[i] - g.node(n)[i], 0.25);
                }
            }
        }
        // lexicographic order
        for n in 1..g.len() {
            assert!(g.lattice(n - 1) < g.lattice(n));
        }
    }

    #[test]
    fn interpolation_at_nodes_is_exact() {
        let g = Grid::new(2, 1.0, 0.25).unwrap();
        let mut w = Vec::new();
        for n in 0..g.len() {
            g.interpolation_weights(g.node(n), &mut w).unwrap();
            assert_eq!(w, vec![(n, 1.0)]);
        }
    }

    #[test]
    fn outside_points_are_domain_errors() {
        let g = Grid::new(2, 1.0, 0.25).unwrap();
        let f = GridField::from_fn(Arc::new(g), |x, o| o.copy_from_slice(x)).unwrap();
        assert!(matches!(f.interpolate(0, &[0.8, 0.5]), Err(Error::Domain(_))));
        assert!(matches!(f.interpolate(0, &[-0.1, 0.5]), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn interpolation_reproduces_affine_maps(
            raw in prop::collection::vec(0.0f64..1.0, 3),
            scale in 0.0f64..1.0,
            a in prop::collection::vec(-3.0f64..3.0, 9),
            b in prop::collection::vec(-3.0f64..3.0, 3),
        ) {
            let g = Arc::new(Grid::new(3, 1.5, 0.25).unwrap());
            let total: f64 = raw.iter().sum::<f64>().max(1e-9);
            let x: Vec<f64> = raw.iter().map(|r| 1.5 * scale * r / total).collect();
            let field = GridField::from_fn(g, |y, o| {
                for i in 0..3 {
                    o[i] = b[i] + (0..3).map(|j| a[3 * i + j] * y[j]).sum::<f64>();
                }
            }).unwrap();
            let u = field.interpolate(0, &x).unwrap();
            for i in 0..3 {
                let exact = b[i] + (0..3).map(|j| a[3 * i + j] * x[j]).sum::<f64>();
                prop_assert!((u[i] - exact).abs() < 1e-9);
            }
        }

        #[test]
        fn interpolation_weights_form_a_partition_of_unity(
            raw in prop::collection::vec(0.0f64..1.0, 2),
            scale in 0.0f64..=1.0,
        ) {
            let g = Grid::new(2, 1.0, 0.125).unwrap();
            let total: f64 = raw.iter().sum::<f64>().max(1e-9);
            let x: Vec<f64> = raw.iter().map(|r| scale * r / total).collect();
            let mut w = Vec::new();
            g.interpolation_weights(&x, &mut w).unwrap();
            prop_assert!((w.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|p| p.1 > 0.0));
        }
    }
}
