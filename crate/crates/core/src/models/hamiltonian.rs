//! Orthant model driven by a convex switching cost, and its reduction to the simplex.
//!
//! `G_i(x, p) = f_i(x) - sum_{j != i} H((p_j - p_i)_-)` with `(q)_- = max(-q, 0)`,
//! and `F = -(D_p G)^T x`, which conserves the total mass.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridField};
use crate::hypotheses::{HypothesisReport, Worst, Witness};
use crate::model::{check_finite, ModelSpec};
use crate::sampling::{point_in_simplex, value_vector, Sampler};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type CostFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Name of the family in run configs.
pub const CONFIG_NAME: &str = "appendix-b";

#[derive(Clone)]
pub struct HamiltonianSpec {
    pub d: usize,
    cost: CostFn,
    h: ScalarFn,
    dh: ScalarFn,
}

impl std::fmt::Debug for HamiltonianSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HamiltonianSpec").field("d", &self.d).finish()
    }
}

impl HamiltonianSpec {
    /// `f(x) = x`, `H(q) = q^2 / 2`.
    pub fn new(d: usize) -> Self {
        Self {
            d,
            cost: Arc::new(|x: &[f64], o: &mut [f64]| o.copy_from_slice(x)),
            h: Arc::new(|q| 0.5 * q * q),
            dh: Arc::new(|q| q),
        }
    }

    pub fn with_cost<C>(mut self, f: C) -> Self
    where
        C: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.cost = Arc::new(f);
        self
    }

    /// Switching cost `H` on `[0, inf)` with its derivative.
    pub fn with_hamiltonian<H, D>(mut self, h: H, dh: D) -> Self
    where
        H: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.h = Arc::new(h);
        self.dh = Arc::new(dh);
        self
    }

    pub fn h(&self, q: f64) -> f64 {
        (self.h)(q)
    }

    pub fn dh(&self, q: f64) -> f64 {
        (self.dh)(q)
    }

    /// `H(0) = 0`, and `H'` nonnegative and nondecreasing on a sample of `[0, 10]`.
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidSpec("the switching model needs at least two states".into()));
        }
        if self.h(0.0).abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!("H(0) must vanish, got {}", self.h(0.0))));
        }
        let mut prev = self.dh(0.0);
        if prev < -1e-12 {
            return Err(Error::InvalidSpec(format!("H'(0) = {prev} is negative")));
        }
        for k in 1..=1000 {
            let q = 0.01 * k as f64;
            let cur = self.dh(q);
            if !cur.is_finite() || cur < prev - 1e-12 {
                return Err(Error::InvalidSpec(format!("H is not convex near q = {q}")));
            }
            prev = cur;
        }
        Ok(())
    }

    /// `D_p G(x, p)`, row-major; rows sum to zero. At ties the inactive side's derivative (0) is used.
    pub fn dp_g(&self, p: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                if j != i && p[i] > p[j] {
                    let s = self.dh(p[i] - p[j]);
                    m[i * d + j] += s;
                    m[i * d + i] -= s;
                }
            }
        }
        m
    }

    pub fn drift(&self, x: &[f64], p: &[f64], out: &mut [f64]) {
        (self.cost)(x, out);
        for i in 0..self.d {
            out[i] -= (0..self.d)
                .filter(|&j| j != i)
                .map(|j| self.h((p[i] - p[j]).max(0.0)))
                .sum::<f64>();
        }
    }

    /// `F = -(D_p G)^T x`.
    pub fn dynamics(&self, x: &[f64], p: &[f64], out: &mut [f64]) {
        let d = self.d;
        let m = self.dp_g(p);
        for (k, o) in out.iter_mut().enumerate() {
            *o = -(0..d).map(|i| m[i * d + k] * x[i]).sum::<f64>();
        }
    }
}

/// The orthant model; no common noise, `r = 1`, `R = 1`.
pub fn hamiltonian_model(spec: &HamiltonianSpec) -> Result<ModelSpec> {
    spec.validate()?;
    let (a, b) = (spec.clone(), spec.clone());
    Ok(ModelSpec::new(
        spec.d,
        move |x: &[f64], p: &[f64], o: &mut [f64]| a.dynamics(x, p, o),
        move |x: &[f64], p: &[f64], o: &mut [f64]| b.drift(x, p, o),
    )
    .named(CONFIG_NAME))
}

/// Sampled `|sum_i F_i| <= 1e-10 (1 + |F|)`.
pub fn mass_conservation(spec: &ModelSpec, sampler: &Sampler) -> Result<HypothesisReport> {
    let d = spec.dim();
    let mut worst = Worst::new();
    let mut f = vec![0.0; d];
    for s in 0..sampler.n_samples {
        let mut rng = sampler.rng(s);
        let x = point_in_simplex(&mut rng, d, sampler.radius);
        let p = value_vector(&mut rng, d, sampler.value_range);
        spec.dynamics_into(&x, &p, &mut f);
        check_finite("F", &f, &x, &p)?;
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        let margin = 1e-10 * (1.0 + norm) - f.iter().sum::<f64>().abs();
        worst.offer(margin, || Witness::at(&x, &p));
    }
    Ok(worst.into_report("mass-conservation", 0.0, sampler.n_samples, false))
}

/// `phi(z) = (z, 1 - sum z)`.
pub fn simplex_lift(z: &[f64]) -> Vec<f64> {
    let mut x = z.to_vec();
    x.push(1.0 - z.iter().sum::<f64>());
    x
}

/// `V_i(t, z) = U_i(t, phi(z)) - U_d(t, phi(z))` tabulated on the `(d-1)`-dimensional unit simplex
/// grid with the source spacing.
pub fn reduce_field(field: &GridField) -> Result<GridField> {
    let src = field.grid();
    let d = src.dim();
    if d < 2 {
        return Err(Error::InvalidArgument("reduction needs at least two states".into()));
    }
    if src.radius() < 1.0 - 1e-12 {
        return Err(Error::Domain(format!(
            "the mass-one slice lies outside the grid of radius {}",
            src.radius()
        )));
    }
    let target = Arc::new(Grid::new(d - 1, 1.0, src.spacing())?);
    let mut slices = Vec::with_capacity(field.n_slices());
    for s in 0..field.n_slices() {
        let mut values = Vec::with_capacity(target.len() * (d - 1));
        for n in 0..target.len() {
            let x: Vec<f64> = simplex_lift(target.node(n)).into_iter().map(|v| v.max(0.0)).collect();
            let u = field.interpolate(s, &x)?;
            values.extend((0..d - 1).map(|i| u[i] - u[d - 1]));
        }
        slices.push(values);
    }
    GridField::new(target, field.times().to_vec(), slices)
}

/// `G~_i(z, V) = G_i(phi(z), psi(V)) - G_d(phi(z), psi(V))`, `F~_i(z, V) = F_i(phi(z), psi(V))`
/// with `psi(V) = (V, 0)`; the initial value is reduced the same way. Posed on `sum z <= 1`.
pub fn reduced_model(spec: &ModelSpec) -> Result<ModelSpec> {
    let d = spec.dim();
    if d < 2 {
        return Err(Error::InvalidArgument("reduction needs at least two states".into()));
    }
    let lift_p = |v: &[f64]| {
        let mut p = v.to_vec();
        p.push(0.0);
        p
    };
    let (fs, gs) = (spec.clone(), spec.clone());
    let mut out = ModelSpec::new(
        d - 1,
        move |z: &[f64], v: &[f64], o: &mut [f64]| {
            let mut f = vec![0.0; d];
            fs.dynamics_into(&simplex_lift(z), &lift_p(v), &mut f);
            o.copy_from_slice(&f[..d - 1]);
        },
        move |z: &[f64], v: &[f64], o: &mut [f64]| {
            let mut g = vec![0.0; d];
            gs.drift_into(&simplex_lift(z), &lift_p(v), &mut g);
            for i in 0..d - 1 {
                o[i] = g[i] - g[d - 1];
            }
        },
    )
    .named(format!("{}-reduced", spec.name))
    .with_discount(spec.discount)
    .with_radius(1.0);
    if spec.has_initial() {
        let s = spec.clone();
        out = out.with_initial(move |z: &[f64], o: &mut [f64]| {
            let x: Vec<f64> = simplex_lift(z).into_iter().map(|v| v.max(0.0)).collect();
            if let Ok(u) = s.initial_value(&x) {
                for i in 0..d - 1 {
                    o[i] = u[i] - u[d - 1];
                }
            } else {
                o.fill(f64::NAN);
            }
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypotheses::check_monotone;
    use crate::numerics::jacobian;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn model() -> ModelSpec {
        hamiltonian_model(&HamiltonianSpec::new(2)).unwrap()
    }

    #[test]
    fn hand_computed_point() {
        let (mut f, mut g) = (vec![0.0; 2], vec![0.0; 2]);
        model().dynamics_into(&[1.0, 1.0], &[1.0, 0.0], &mut f);
        model().drift_into(&[1.0, 1.0], &[1.0, 0.0], &mut g);
        assert_eq!(g, vec![0.5, 1.0]);
        assert_eq!(f, vec![1.0, -1.0]);
        assert_eq!(f.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn equal_values_and_zero_mass() {
        let m = hamiltonian_model(&HamiltonianSpec::new(3)).unwrap();
        let (mut f, mut g) = (vec![0.0; 3], vec![0.0; 3]);
        m.dynamics_into(&[0.2, 0.3, 0.1], &[0.7; 3], &mut f);
        m.drift_into(&[0.2, 0.3, 0.1], &[0.7; 3], &mut g);
        assert_eq!(f, vec![0.0; 3]);
        assert_eq!(g, vec![0.2, 0.3, 0.1]);
        m.dynamics_into(&[0.0; 3], &[0.3, -1.0, 2.0], &mut f);
        assert_eq!(f, vec![0.0; 3]);
    }

    #[test]
    fn rejects_bad_hamiltonians() {
        let shifted = HamiltonianSpec::new(2).with_hamiltonian(|q| 1.0 + q, |_| 1.0);
        assert!(shifted.validate().is_err());
        let concave = HamiltonianSpec::new(2).with_hamiltonian(|q| q.sqrt(), |q| 0.5 / q.max(1e-3).sqrt());
        assert!(concave.validate().is_err());
    }

    #[test]
    fn mass_is_conserved_on_many_samples() {
        let m = hamiltonian_model(&HamiltonianSpec::new(4)).unwrap();
        let rep = mass_conservation(&m, &Sampler::new(1, 10_000, 2.0)).unwrap();
        assert!(rep.verdict.passed(), "{rep:?}");
    }

    #[test]
    fn model_is_monotone_when_sampled() {
        let rep = check_monotone(&model(), &Sampler::new(2, 2000, 1.0)).unwrap();
        assert!(rep.verdict.passed(), "{rep:?}");
    }

    #[test]
    fn reduce_identity_field() {
        let g = Arc::new(Grid::new(2, 1.0, 0.125).unwrap());
        let f = GridField::from_fn(g, |x, o| o.copy_from_slice(x)).unwrap();
        let r = reduce_field(&f).unwrap();
        for n in 0..r.grid().len() {
            let z = r.grid().node(n)[0];
            assert_relative_eq!(r.value(0, n)[0], 2.0 * z - 1.0, epsilon = 1e-12);
        }
        let flat = GridField::from_fn(f.grid_arc().clone(), |_, o| o.fill(0.4)).unwrap();
        assert!(reduce_field(&flat).unwrap().slice(0).iter().all(|v| v.abs() < 1e-15));
        let small = GridField::from_fn(Arc::new(Grid::new(2, 0.5, 0.125).unwrap()), |_, o| o.fill(0.0)).unwrap();
        assert!(matches!(reduce_field(&small), Err(Error::Domain(_))));
    }

    #[test]
    fn reduced_couplings_by_hand() {
        let r = reduced_model(&model()).unwrap();
        let h = |q: f64| 0.5 * q * q;
        let neg = |q: f64| (-q).max(0.0);
        for (z, v) in [(0.3, 0.7), (0.8, -0.4), (0.5, 0.0)] {
            let mut g = [0.0];
            r.drift_into(&[z], &[v], &mut g);
            let expected = z - (1.0 - z) - h(neg(-v)) + h(neg(v));
            assert_relative_eq!(g[0], expected, epsilon = 1e-14);
        }
        let mut g = [0.0];
        r.drift_into(&[0.25], &[0.0], &mut g);
        assert_relative_eq!(g[0], 0.25 - 0.75, epsilon = 1e-15);
    }

    #[test]
    fn reduced_model_is_monotone() {
        let r = reduced_model(&hamiltonian_model(&HamiltonianSpec::new(3)).unwrap()).unwrap();
        let rep = check_monotone(&r, &Sampler::new(4, 10_000, 1.0)).unwrap();
        assert!(rep.verdict.passed(), "{rep:?}");
    }

    proptest! {
        #[test]
        fn analytic_dpg_matches_finite_differences(
            x in prop::collection::vec(0.0f64..1.0, 3),
            p in prop::collection::vec(-2.0f64..2.0, 3),
        ) {
            // stay away from the kinks p_i = p_j
            prop_assume!((0..3).all(|i| (0..3).all(|j| i == j || (p[i] - p[j]).abs() > 1e-3)));
            let hs = HamiltonianSpec::new(3);
            let m = hamiltonian_model(&hs).unwrap();
            let fd = jacobian(3, &p, |q, o| m.drift_into(&x, q, o));
            let an = hs.dp_g(&p);
            for i in 0..3 {
                for k in 0..3 {
                    prop_assert!((fd[(i, k)] - an[i * 3 + k]).abs() < 1e-7);
                }
            }
            let mut f = vec![0.0; 3];
            m.dynamics_into(&x, &p, &mut f);
            for k in 0..3 {
                let adj: f64 = -(0..3).map(|i| fd[(i, k)] * x[i]).sum::<f64>();
                prop_assert!((f[k] - adj).abs() < 1e-7);
            }
        }
    }
}
