//! Sampled validators for the structural assumptions a model must satisfy
//! before its solutions can be trusted, plus the zero-mass value problem.
//!
//! Only falsification is decidable for arbitrary `F`, `G`: a passing report is
//! evidence over the drawn samples, a failing one carries a concrete witness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::model::{dot, ModelSpec};
use crate::numerics::{jacobian, min_sym_eigenvalue, orthant_jacobian, solve_linear, spectral_norm, sup_norm};
use crate::sampling::{boundary_point, outer_point, point_in_simplex, value_vector, Sampler};

/// Default tolerance for sampled inequalities.
pub const SAMPLED_TOL: f64 = 1e-6;
/// Default tolerance for algebraic identities.
pub const ALGEBRAIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    /// No sampled counterexample.
    PassSampled,
    /// Decided exactly (no sampling involved).
    PassExact,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn passed(self) -> bool {
        matches!(self, Verdict::PassSampled | Verdict::PassExact)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Witness {
    pub fn at(x: &[f64], p: &[f64]) -> Self {
        Self {
            x: x.to_vec(),
            p: p.to_vec(),
            y: None,
            q: None,
            detail: None,
        }
    }

    pub fn pair(x: &[f64], p: &[f64], y: &[f64], q: &[f64]) -> Self {
        Self {
            y: Some(y.to_vec()),
            q: Some(q.to_vec()),
            ..Self::at(x, p)
        }
    }

    pub fn note(detail: impl Into<String>) -> Self {
        Self {
            x: vec![],
            p: vec![],
            y: None,
            q: None,
            detail: Some(detail.into()),
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

/// Outcome of one structural check. `verdict == Fail` exactly when
/// `margin < -tolerance`, and then `witness` holds the offending sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub hypothesis: String,
    pub verdict: Verdict,
    pub margin: f64,
    pub tolerance: f64,
    pub samples: usize,
    pub witness: Option<Witness>,
}

/// Running minimum of a margin with the sample that produced it.
#[derive(Debug)]
pub(crate) struct Worst {
    pub margin: f64,
    pub witness: Option<Witness>,
}

impl Worst {
    pub fn new() -> Self {
        Self {
            margin: f64::INFINITY,
            witness: None,
        }
    }

    pub fn offer(&mut self, margin: f64, witness: impl FnOnce() -> Witness) {
        if margin < self.margin || (margin.is_nan() && !self.margin.is_nan()) {
            self.margin = margin;
            self.witness = Some(witness());
        }
    }

    pub fn into_report(self, hypothesis: &str, tolerance: f64, samples: usize, exact: bool) -> HypothesisReport {
        let margin = if self.margin.is_infinite() { 0.0 } else { self.margin };
        let verdict = if margin.is_nan() {
            Verdict::Inconclusive
        } else if margin < -tolerance {
            Verdict::Fail
        } else if exact {
            Verdict::PassExact
        } else {
            Verdict::PassSampled
        };
        HypothesisReport {
            hypothesis: hypothesis.to_string(),
            verdict,
            margin,
            tolerance,
            samples,
            witness: if verdict == Verdict::Fail { self.witness } else { None },
        }
    }
}

fn noise_nonnegative(spec: &ModelSpec, worst: &mut Worst) {
    for i in 0..spec.dim() {
        for j in 0..spec.dim() {
            let t = spec.noise_map[(i, j)];
            worst.offer(t, || Witness::note(format!("noise map entry ({i},{j}) = {t}")));
        }
    }
}

/// Boundary invariance: wherever `x_i = 0`, `F_i(x, p) <= tol`, and the noise map
/// sends the orthant into itself.
///
/// With `solution`, `p` is read from the field's last slice instead of being drawn,
/// which checks the weaker solution-dependent form of the condition.
pub fn check_boundary_invariance(
    spec: &ModelSpec,
    sampler: &Sampler,
    solution: Option<&GridField>,
) -> Result<HypothesisReport> {
    let d = spec.dim();
    let tol = SAMPLED_TOL;
    let mut worst = Worst::new();
    noise_nonnegative(spec, &mut worst);
    let radius = solution.map_or(sampler.radius, |f| f.grid().radius());
    let mut fx = vec![0.0; d];
    for s in 0..sampler.n_samples {
        let mut rng = sampler.rng(s);
        let x = boundary_point(&mut rng, d, radius);
        let p = match solution {
            Some(field) => field.interpolate(field.n_slices() - 1, &x)?,
            None => value_vector(&mut rng, d, sampler.value_range),
        };
        spec.dynamics_into(&x, &p, &mut fx);
        crate::model::check_finite("F", &fx, &x, &p)?;
        for i in (0..d).filter(|&i| x[i] == 0.0) {
            worst.offer(-fx[i], || Witness::at(&x, &p).with_detail(format!("outward flux in state {i}")));
        }
    }
    Ok(worst.into_report("boundary-invariance", tol, sampler.n_samples, false))
}

/// Mass bound: for `|x|_1 >= R`, `sum_i F_i(x, p) >= -tol`, and the noise map
/// keeps the truncated simplex invariant (max column sum at most one).
pub fn check_mass_bound(spec: &ModelSpec, sampler: &Sampler) -> Result<HypothesisReport> {
    let d = spec.dim();
    let tol = SAMPLED_TOL;
    let mut worst = Worst::new();
    noise_nonnegative(spec, &mut worst);
    let col_max = noise_column_sum_max(spec);
    worst.offer(1.0 - col_max, || Witness::note(format!("noise map column sum {col_max} > 1")));
    let mut fx = vec![0.0; d];
    for s in 0..sampler.n_samples {
        let mut rng = sampler.rng(s);
        let x = outer_point(&mut rng, d, spec.radius);
        let p = value_vector(&mut rng, d, sampler.value_range);
        spec.dynamics_into(&x, &p, &mut fx);
        crate::model::check_finite("F", &fx, &x, &p)?;
        let total: f64 = fx.iter().sum();
        worst.offer(total, || Witness::at(&x, &p).with_detail("net inward mass flow"));
    }
    Ok(worst.into_report("mass-bound", tol, sampler.n_samples, false))
}

pub fn noise_column_sum_max(spec: &ModelSpec) -> f64 {
    (0..spec.dim())
        .map(|j| (0..spec.dim()).map(|i| spec.noise_map[(i, j)]).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Pair monotonicity of `(G, F)` and of `U0`:
/// `<G(x,U)-G(y,V), x-y> + <F(x,U)-F(y,V), U-V> >= -tol`.
pub fn check_monotone(spec: &ModelSpec, sampler: &Sampler) -> Result<HypothesisReport> {
    let d = spec.dim();
    let tol = SAMPLED_TOL;
    let mut worst = Worst::new();
    let (mut gx, mut gy, mut fx, mut fy) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for s in 0..sampler.n_samples {
        let mut rng = sampler.rng(s);
        let x = point_in_simplex(&mut rng, d, sampler.radius);
        let y = point_in_simplex(&mut rng, d, sampler.radius);
        let u = value_vector(&mut rng, d, sampler.value_range);
        let v = value_vector(&mut rng, d, sampler.value_range);
        spec.drift_into(&x, &u, &mut gx);
        spec.drift_into(&y, &v, &mut gy);
        spec.dynamics_into(&x, &u, &mut fx);
        spec.dynamics_into(&y, &v, &mut fy);
        let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let du: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
        let dg: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a - b).collect();
        let df: Vec<f64> = fx.iter().zip(&fy).map(|(a, b)| a - b).collect();
        let m = dot(&dg, &dx) + dot(&df, &du);
        worst.offer(m, || Witness::pair(&x, &u, &y, &v).with_detail("coupling pair"));
        if spec.has_initial() {
            let ux = spec.initial_value(&x)?;
            let uy = spec.initial_value(&y)?;
            let d0: Vec<f64> = ux.iter().zip(&uy).map(|(a, b)| a - b).collect();
            let m0 = dot(&d0, &dx);
            worst.offer(m0, || Witness::pair(&x, &ux, &y, &uy).with_detail("initial value map"));
        }
    }
    Ok(worst.into_report("monotone", tol, sampler.n_samples, false))
}

/// Jacobian blocks of `(x, p) -> (G, F)` at a point.
pub struct CouplingJacobian {
    pub dx_g: nalgebra::DMatrix<f64>,
    pub dp_g: nalgebra::DMatrix<f64>,
    pub dx_f: nalgebra::DMatrix<f64>,
    pub dp_f: nalgebra::DMatrix<f64>,
}

pub fn coupling_jacobian(spec: &ModelSpec, x: &[f64], p: &[f64]) -> Result<CouplingJacobian> {
    let d = spec.dim();
    let dx_g = orthant_jacobian(d, x, |z, o| spec.drift_into(z, p, o));
    let dx_f = orthant_jacobian(d, x, |z, o| spec.dynamics_into(z, p, o));
    let dp_g = jacobian(d, p, |q, o| spec.drift_into(x, q, o));
    let dp_f = jacobian(d, p, |q, o| spec.dynamics_into(x, q, o));
    for (name, m) in [("DxG", &dx_g), ("DxF", &dx_f), ("DpG", &dp_g), ("DpF", &dp_f)] {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelEvaluation {
                component: name,
                index: m.iter().position(|v| !v.is_finite()).unwrap_or(0),
                x: x.to_vec(),
                p: p.to_vec(),
            });
        }
    }
    Ok(CouplingJacobian { dx_g, dp_g, dx_f, dp_f })
}

/// Strong monotonicity: the symmetrized block Jacobian dominates `alpha diag(Id, 0)`,
/// and `<xi, DU0 xi> >= alpha |DU0 xi|^2`.
pub fn check_strong_monotone(spec: &ModelSpec, alpha: f64, sampler: &Sampler) -> Result<HypothesisReport> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    let d = spec.dim();
    let tol = SAMPLED_TOL;
    let mut worst = Worst::new();
    for s in 0..sampler.n_samples {
        let mut rng = sampler.rng(s);
        let x = point_in_simplex(&mut rng, d, sampler.radius);
        let p = value_vector(&mut rng, d, sampler.value_range);
        let jac = coupling_jacobian(spec, &x, &p)?;
        let mut block = nalgebra::DMatrix::zeros(2 * d, 2 * d);
        block.view_mut((0, 0), (d, d)).copy_from(&jac.dx_g);
        block.view_mut((0, d), (d, d)).copy_from(&jac.dx_f);
        block.view_mut((d, 0), (d, d)).copy_from(&jac.dp_g);
        block.view_mut((d, d), (d, d)).copy_from(&jac.dp_f);
        for i in 0..d {
            block[(i, i)] -= alpha;
        }
        let m = min_sym_eigenvalue(&block);
        worst.offer(m, || Witness::at(&x, &p).with_detail("coupling block"));
        if let Some(u0) = spec.initial_fn() {
            let a = orthant_jacobian(d, &x, |z, o| u0(z, o));
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::ModelEvaluation {
                    component: "DU0",
                    index: 0,
                    x: x.clone(),
                    p: vec![],
                });
            }
            let sym = (&a + a.transpose()) * 0.5 - a.transpose() * &a * alpha;
            let m0 = sym.symmetric_eigenvalues().min();
            worst.offer(m0, || Witness::at(&x, &[]).with_detail("initial value map"));
        }
    }
    Ok(worst.into_report("strong-monotone", tol, sampler.n_samples, false))
}

/// Discount dominance: `r > ||D_x F(x, p)|| + tol` at every sample.
///
/// The reported margin is `r - ||D_x F|| - tol` with zero report tolerance.
pub fn check_discount(spec: &ModelSpec, sampler: &Sampler) -> Result<HypothesisReport> {
    let d = spec.dim();
    let tol = SAMPLED_TOL;
    let mut worst = Worst::new();
    for s in 0..sampler.n_samples {
        let mut rng = sampler.rng(s);
        let x = point_in_simplex(&mut rng, d, sampler.radius);
        let p = value_vector(&mut rng, d, sampler.value_range);
        let a = orthant_jacobian(d, &x, |z, o| spec.dynamics_into(z, &p, o));
        let norm = spectral_norm(&a);
        if !norm.is_finite() {
            return Err(Error::ModelEvaluation {
                component: "DxF",
                index: 0,
                x,
                p,
            });
        }
        // strict inequality: equality must fail
        let m = spec.discount - norm - tol;
        let m = if m == 0.0 { -f64::MIN_POSITIVE } else { m };
        worst.offer(m, || Witness::at(&x, &p).with_detail(format!("||DxF|| = {norm}")));
    }
    Ok(worst.into_report("discount", 0.0, sampler.n_samples, false))
}

/// Sampled sup of `||D_x F||` and `||D_x G||` over the truncated simplex.
pub fn lipschitz_estimates(spec: &ModelSpec, sampler: &Sampler) -> (f64, f64) {
    let d = spec.dim();
    let (mut lf, mut lg) = (0.0_f64, 0.0_f64);
    for s in 0..sampler.n_samples {
        let mut rng = sampler.rng(s);
        let x = point_in_simplex(&mut rng, d, sampler.radius);
        let p = value_vector(&mut rng, d, sampler.value_range);
        lf = lf.max(spectral_norm(&orthant_jacobian(d, &x, |z, o| spec.dynamics_into(z, &p, o))));
        lg = lg.max(spectral_norm(&orthant_jacobian(d, &x, |z, o| spec.drift_into(z, &p, o))));
    }
    (lf, lg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroMassSolution {
    pub value: Vec<f64>,
    /// Whether the value lies in the orthant, as the existence theory requires.
    pub in_orthant: bool,
    pub residual: f64,
    pub iterations: usize,
}

/// Solves `r V + lambda (V - T* V) + G(0, -V) = 0`, the value of a player facing
/// zero population mass. Requires `F(0, p) = 0`, which is checked on sampled `p`.
pub fn solve_zero_mass(spec: &ModelSpec, tol: f64, max_iter: usize) -> Result<ZeroMassSolution> {
    spec.validate()?;
    spec.require_discount()?;
    let d = spec.dim();
    let origin = vec![0.0; d];
    let mut fx = vec![0.0; d];
    let probe = Sampler::new(0x5eed, 64, spec.radius);
    for s in 0..probe.n_samples {
        let mut rng = probe.rng(s);
        let p = value_vector(&mut rng, d, probe.value_range);
        spec.dynamics_into(&origin, &p, &mut fx);
        if sup_norm(&fx) > ALGEBRAIC_TOL {
            return Err(Error::InvalidSpec(format!(
                "F(0, p) must vanish for the zero-mass problem; F(0, {p:?}) = {fx:?}"
            )));
        }
    }

    let residual = |v: &[f64], out: &mut [f64]| {
        let neg: Vec<f64> = v.iter().map(|c| -c).collect();
        let mut g = vec![0.0; d];
        spec.drift_into(&origin, &neg, &mut g);
        let mut tv = vec![0.0; d];
        spec.noise_adjoint(v, &mut tv);
        for i in 0..d {
            out[i] = spec.discount * v[i] + spec.lambda * (v[i] - tv[i]) + g[i];
        }
    };

    let mut v = vec![0.0; d];
    let mut r = vec![0.0; d];
    residual(&v, &mut r);
    let mut norm = sup_norm(&r);
    for it in 0..max_iter {
        if !norm.is_finite() {
            break;
        }
        if norm <= tol {
            return Ok(ZeroMassSolution {
                in_orthant: v.iter().all(|c| *c >= -tol),
                value: v,
                residual: norm,
                iterations: it,
            });
        }
        let jac = jacobian(d, &v, |z, o| residual(z, o));
        let neg_r: Vec<f64> = r.iter().map(|c| -c).collect();
        let step = match solve_linear(jac, &neg_r) {
            Some(s) => s,
            // singular Jacobian: plain residual step
            None => neg_r.iter().map(|c| c / spec.discount.max(1.0)).collect(),
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = v.iter().zip(&step).map(|(a, b)| a + scale * b).collect();
            let mut rt = vec![0.0; d];
            residual(&trial, &mut rt);
            let nt = sup_norm(&rt);
            if nt < norm {
                v = trial;
                r = rt;
                norm = nt;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if norm <= tol {
        return Ok(ZeroMassSolution {
            in_orthant: v.iter().all(|c| *c >= -tol),
            value: v,
            residual: norm,
            iterations: max_iter,
        });
    }
    Err(Error::NonConvergence {
        module: "zero-mass",
        iterations: max_iter,
        residual: norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn zero() -> impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static {
        |_: &[f64], _: &[f64], o: &mut [f64]| o.fill(0.0)
    }

    fn sampler() -> Sampler {
        Sampler::new(11, 2000, 1.0)
    }

    #[test]
    fn inward_linear_flux_passes_boundary_check() {
        let spec = ModelSpec::new(3, |x: &[f64], _: &[f64], o: &mut [f64]| {
            for i in 0..3 {
                o[i] = -x[i];
            }
        }, zero());
        let rep = check_boundary_invariance(&spec, &sampler(), None).unwrap();
        assert_eq!(rep.verdict, Verdict::PassSampled);
    }

    #[test]
    fn constant_outward_flux_fails_with_boundary_witness() {
        let spec = ModelSpec::new(2, |_: &[f64], _: &[f64], o: &mut [f64]| o.fill(1.0), zero());
        let rep = check_boundary_invariance(&spec, &sampler(), None).unwrap();
        assert_eq!(rep.verdict, Verdict::Fail);
        let w = rep.witness.unwrap();
        assert!(w.x.iter().any(|v| *v == 0.0));
        assert!(rep.margin <= -1.0 + 1e-12);
    }

    #[test]
    fn mass_bound_cases() {
        let spec = ModelSpec::new(2, zero(), zero());
        assert!(check_mass_bound(&spec, &sampler()).unwrap().verdict.passed());

        let inward = ModelSpec::new(2, |x: &[f64], _: &[f64], o: &mut [f64]| {
            o[0] = -x[0];
            o[1] = -x[1];
        }, zero());
        assert_eq!(check_mass_bound(&inward, &sampler()).unwrap().verdict, Verdict::Fail);

        let zero_t = ModelSpec::new(2, zero(), zero()).with_noise(1.0, DMatrix::zeros(2, 2));
        assert!(check_mass_bound(&zero_t, &sampler()).unwrap().verdict.passed());

        let spreading = ModelSpec::new(2, zero(), zero())
            .with_noise(1.0, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]));
        assert_eq!(check_mass_bound(&spreading, &sampler()).unwrap().verdict, Verdict::Fail);
    }

    #[test]
    fn monotone_cases() {
        let id = ModelSpec::new(2, zero(), |x: &[f64], _: &[f64], o: &mut [f64]| o.copy_from_slice(x))
            .with_initial(|x: &[f64], o: &mut [f64]| o.copy_from_slice(x));
        assert!(check_monotone(&id, &sampler()).unwrap().verdict.passed());
        let anti = ModelSpec::new(2, zero(), |x: &[f64], _: &[f64], o: &mut [f64]| {
            o[0] = -x[0];
            o[1] = -x[1];
        });
        assert_eq!(check_monotone(&anti, &sampler()).unwrap().verdict, Verdict::Fail);
    }

    #[test]
    fn strong_monotone_cases() {
        let s = Sampler::new(3, 50, 1.0);
        let id = ModelSpec::new(2, zero(), |x: &[f64], _: &[f64], o: &mut [f64]| o.copy_from_slice(x))
            .with_initial(|x: &[f64], o: &mut [f64]| o.copy_from_slice(x));
        assert!(check_strong_monotone(&id, 0.5, &s).unwrap().verdict.passed());
        assert!(check_strong_monotone(&id, 1.0, &s).unwrap().verdict.passed());
        let nothing = ModelSpec::new(2, zero(), zero());
        assert_eq!(check_strong_monotone(&nothing, 0.5, &s).unwrap().verdict, Verdict::Fail);
        let u0_only = ModelSpec::new(2, zero(), |x: &[f64], _: &[f64], o: &mut [f64]| o.copy_from_slice(x))
            .with_initial(|x: &[f64], o: &mut [f64]| o.copy_from_slice(x));
        // U0 = x fails the initial clause once alpha exceeds one
        assert_eq!(check_strong_monotone(&u0_only, 1.5, &s).unwrap().verdict, Verdict::Fail);
    }

    #[test]
    fn discount_cases() {
        let s = Sampler::new(5, 50, 1.0);
        let still = ModelSpec::new(2, zero(), zero()).with_discount(0.1);
        assert!(check_discount(&still, &s).unwrap().verdict.passed());
        let fast = ModelSpec::new(2, |x: &[f64], _: &[f64], o: &mut [f64]| {
            o[0] = 2.0 * x[0];
            o[1] = 2.0 * x[1];
        }, zero())
        .with_discount(1.0);
        let rep = check_discount(&fast, &s).unwrap();
        assert_eq!(rep.verdict, Verdict::Fail);
        assert_relative_eq!(rep.margin, 1.0 - 2.0 - SAMPLED_TOL, epsilon = 1e-6);
    }

    #[test]
    fn zero_mass_examples() {
        let c = ModelSpec::new(2, zero(), |_: &[f64], _: &[f64], o: &mut [f64]| o.fill(-2.0)).with_discount(1.0);
        let sol = solve_zero_mass(&c, 1e-10, 50).unwrap();
        assert_relative_eq!(sol.value[0], 2.0, epsilon = 1e-9);
        assert!(sol.in_orthant);

        let noisy = c.clone().with_noise(0.7, DMatrix::identity(2, 2));
        let sol = solve_zero_mass(&noisy, 1e-10, 50).unwrap();
        assert_relative_eq!(sol.value[1], 2.0, epsilon = 1e-9);

        let lin = ModelSpec::new(1, zero(), |_: &[f64], p: &[f64], o: &mut [f64]| o[0] = p[0]).with_discount(2.0);
        let sol = solve_zero_mass(&lin, 1e-10, 50).unwrap();
        assert!(sol.value[0].abs() < 1e-9);
    }

    #[test]
    fn zero_mass_requires_still_empty_population() {
        let moving = ModelSpec::new(1, |_: &[f64], _: &[f64], o: &mut [f64]| o[0] = 1.0, zero());
        assert!(matches!(solve_zero_mass(&moving, 1e-9, 10), Err(Error::InvalidSpec(_))));
    }
}
