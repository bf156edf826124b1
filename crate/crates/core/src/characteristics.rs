//! Grid-free characteristics for the case without common noise.
//!
//! Along a characteristic, `V(t) = U(t, y(t))` with `y' = F(y, V)`, `V' = G(y, V)`,
//! `V(0) = U0(y(0))`. The value at `(t_f, y0)` is found by shooting on the initial
//! point `z = y(0)` until `y(t_f) = y0`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_finite, ModelSpec, OrthantPoint};
use crate::numerics::{solve_linear, sup_norm};
use crate::stopping::StoppingConfig;

/// Coordinates down to this value are clipped to zero; below it the trajectory has escaped.
pub const ESCAPE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> (&[f64], &[f64]) {
        (self.y.last().expect("nonempty"), self.v.last().expect("nonempty"))
    }

    /// Columns `t, y_1..y_d, V_1..V_d`.
    pub fn to_csv(&self) -> String {
        let d = self.y.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for i in 1..=d {
            let _ = write!(out, ",y_{i}");
        }
        for i in 1..=d {
            let _ = write!(out, ",V_{i}");
        }
        out.push('\n');
        for ((t, y), v) in self.times.iter().zip(&self.y).zip(&self.v) {
            let _ = write!(out, "{t:e}");
            for c in y.iter().chain(v) {
                let _ = write!(out, ",{c:e}");
            }
            out.push('\n');
        }
        out
    }
}

fn require_no_noise(spec: &ModelSpec) -> Result<()> {
    if spec.lambda != 0.0 {
        return Err(Error::Unsupported(
            "characteristics are only available without common noise (lambda = 0)".into(),
        ));
    }
    Ok(())
}

fn step_count(t_f: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t_f >= 0.0) || !t_f.is_finite() {
        return Err(Error::InvalidArgument(format!("need dt > 0 and t_f >= 0, got dt={dt}, t_f={t_f}")));
    }
    Ok(((t_f / dt) - 1e-9).ceil().max(0.0) as usize)
}

/// One classical RK4 step of the coupled system, in place.
fn rk4_step(spec: &ModelSpec, y: &mut [f64], v: &mut [f64], dt: f64) -> Result<()> {
    let d = y.len();
    let rhs = |y: &[f64], v: &[f64], dy: &mut [f64], dv: &mut [f64]| -> Result<()> {
        spec.dynamics_into(y, v, dy);
        spec.drift_into(y, v, dv);
        check_finite("F", dy, y, v)?;
        check_finite("G", dv, y, v)
    };
    let mut k = [vec![0.0; 2 * d], vec![0.0; 2 * d], vec![0.0; 2 * d], vec![0.0; 2 * d]];
    let mut ys = vec![0.0; d];
    let mut vs = vec![0.0; d];
    for stage in 0..4 {
        let c = match stage {
            0 => 0.0,
            1 | 2 => 0.5 * dt,
            _ => dt,
        };
        for i in 0..d {
            let (ky, kv) = if stage == 0 { (0.0, 0.0) } else { (k[stage - 1][i], k[stage - 1][d + i]) };
            ys[i] = y[i] + c * ky;
            vs[i] = v[i] + c * kv;
        }
        let (dy, dv) = k[stage].split_at_mut(d);
        rhs(&ys, &vs, dy, dv)?;
    }
    for i in 0..d {
        y[i] += dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        v[i] += dt / 6.0 * (k[0][d + i] + 2.0 * k[1][d + i] + 2.0 * k[2][d + i] + k[3][d + i]);
    }
    Ok(())
}

fn clip_to_orthant(y: &mut [f64], time: f64) -> Result<()> {
    for (index, c) in y.iter_mut().enumerate() {
        if *c < 0.0 {
            if *c < -ESCAPE_TOL {
                return Err(Error::TrajectoryEscape { time, index, value: *c });
            }
            *c = 0.0;
        }
    }
    Ok(())
}

/// Integrates `y' = F(y, V)`, `V' = G(y, V)` from `y(0) = z`, `V(0) = U0(z)` with RK4.
///
/// `z` may lie outside the truncated simplex.
pub fn integrate_coupled(spec: &ModelSpec, z: &OrthantPoint, t_f: f64, dt: f64) -> Result<Trajectory> {
    integrate(spec, z, t_f, dt, None)
}

/// Characteristics of the penalized stopping problem:
/// `V' = G(y, V) - V_+ / eps`, `y' = F(y, V) + beta'(V) * y / eps`.
///
/// The stiff part is split off (Strang) and solved exactly: while `V_i > 0` it
/// decays as `exp(-t/eps)` and `y_i` grows as `exp(t/eps)`.
pub fn integrate_penalized(
    spec: &ModelSpec,
    config: &StoppingConfig,
    z: &OrthantPoint,
    t_f: f64,
    dt: f64,
    eps: f64,
) -> Result<Trajectory> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    integrate(spec, z, t_f, dt, Some((eps, config.beta_prime_at_zero)))
}

fn stiff_substep(y: &mut [f64], v: &mut [f64], tau: f64, eps: f64, beta0: f64) {
    for (yi, vi) in y.iter_mut().zip(v.iter_mut()) {
        if *vi > 0.0 {
            *vi *= (-tau / eps).exp();
            *yi *= (tau / eps).exp();
        } else if *vi == 0.0 && beta0 > 0.0 {
            *yi *= (beta0 * tau / eps).exp();
        }
    }
}

fn integrate(
    spec: &ModelSpec,
    z: &OrthantPoint,
    t_f: f64,
    dt: f64,
    penalty: Option<(f64, f64)>,
) -> Result<Trajectory> {
    require_no_noise(spec)?;
    let d = spec.dim();
    if z.dim() != d {
        return Err(Error::InvalidArgument(format!("z has length {}, expected {d}", z.dim())));
    }
    let n = step_count(t_f, dt)?;
    let h = if n == 0 { 0.0 } else { t_f / n as f64 };
    let mut y = z.as_slice().to_vec();
    let mut v = spec.initial_value(&y)?;
    let mut traj = Trajectory {
        times: Vec::with_capacity(n + 1),
        y: Vec::with_capacity(n + 1),
        v: Vec::with_capacity(n + 1),
    };
    traj.times.push(0.0);
    traj.y.push(y.clone());
    traj.v.push(v.clone());
    for k in 0..n {
        let t = (k + 1) as f64 * h;
        match penalty {
            None => rk4_step(spec, &mut y, &mut v, h)?,
            Some((eps, beta0)) => {
                stiff_substep(&mut y, &mut v, 0.5 * h, eps, beta0);
                rk4_step(spec, &mut y, &mut v, h)?;
                stiff_substep(&mut y, &mut v, 0.5 * h, eps, beta0);
            }
        }
        clip_to_orthant(&mut y, t)?;
        if y.iter().chain(&v).any(|c| !c.is_finite()) {
            return Err(Error::BlowUp { module: "characteristics", time: t });
        }
        traj.times.push(t);
        traj.y.push(y.clone());
        traj.v.push(v.clone());
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvpSolution {
    pub value: Vec<f64>,
    /// Initial point of the characteristic reaching `y0` at `t_f`.
    pub origin: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ShootingOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 60 }
    }
}

/// `U(t_f, y0)` by damped Newton shooting on `z = y(0)` with a fixed-point fallback.
pub fn solve_bvp(spec: &ModelSpec, y0: &OrthantPoint, t_f: f64, dt: f64) -> Result<BvpSolution> {
    solve_bvp_with(spec, y0, t_f, dt, ShootingOptions::default())
}

pub fn solve_bvp_with(
    spec: &ModelSpec,
    y0: &OrthantPoint,
    t_f: f64,
    dt: f64,
    opts: ShootingOptions,
) -> Result<BvpSolution> {
    require_no_noise(spec)?;
    let d = spec.dim();
    let target = y0.as_slice();
    let shoot = |z: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let zp = OrthantPoint::new(z.to_vec())?;
        let traj = integrate_coupled(spec, &zp, t_f, dt)?;
        let (y, v) = traj.final_state();
        let r: Vec<f64> = y.iter().zip(target).map(|(a, b)| a - b).collect();
        Ok((r, v.to_vec()))
    };

    let mut z = target.to_vec();
    let (mut r, mut value) = shoot(&z)?;
    let mut norm = sup_norm(&r);
    let (mut best_norm, mut best_z) = (norm, z.clone());
    for it in 0..opts.max_iter {
        if norm <= opts.tol {
            return Ok(BvpSolution {
                value,
                origin: z,
                residual: norm,
                iterations: it,
            });
        }
        let step = newton_direction(&shoot, &z, &r).unwrap_or_else(|| r.iter().map(|c| -c).collect());
        let mut accepted = try_step(&shoot, &z, &step, norm)?;
        if accepted.is_none() {
            // fixed-point fallback: move the origin against the miss
            let fp: Vec<f64> = r.iter().map(|c| -c).collect();
            accepted = try_step(&shoot, &z, &fp, norm)?;
        }
        match accepted {
            Some((zn, rn, vn, nn)) => {
                z = zn;
                r = rn;
                value = vn;
                norm = nn;
                if norm < best_norm {
                    best_norm = norm;
                    best_z = z.clone();
                }
            }
            None => break,
        }
    }
    if norm <= opts.tol {
        return Ok(BvpSolution {
            value,
            origin: z,
            residual: norm,
            iterations: opts.max_iter,
        });
    }
    debug_assert_eq!(best_z.len(), d);
    Err(Error::Shooting {
        residual: best_norm,
        iterate: best_z,
    })
}

type Shot = (Vec<f64>, Vec<f64>, Vec<f64>, f64);

fn newton_direction<S>(shoot: &S, z: &[f64], r: &[f64]) -> Option<Vec<f64>>
where
    S: Fn(&[f64]) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let d = z.len();
    let mut jac = nalgebra::DMatrix::zeros(d, d);
    let mut zp = z.to_vec();
    for j in 0..d {
        let step = 1e-6 * (1.0 + z[j].abs());
        zp[j] = z[j] + step;
        let (rp, _) = shoot(&zp).ok()?;
        zp[j] = z[j];
        for i in 0..d {
            jac[(i, j)] = (rp[i] - r[i]) / step;
        }
    }
    let neg: Vec<f64> = r.iter().map(|c| -c).collect();
    solve_linear(jac, &neg).filter(|s| s.iter().all(|c| c.is_finite()))
}

/// Halves the step (at most 30 times) until the residual decreases.
fn try_step<S>(shoot: &S, z: &[f64], step: &[f64], norm: f64) -> Result<Option<Shot>>
where
    S: Fn(&[f64]) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let mut scale = 1.0;
    for _ in 0..=30 {
        let trial: Vec<f64> = z.iter().zip(step).map(|(a, b)| (a + scale * b).max(0.0)).collect();
        if let Ok((rt, vt)) = shoot(&trial) {
            let nt = sup_norm(&rt);
            if nt < norm {
                return Ok(Some((trial, rt, vt, nt)));
            }
        }
        scale *= 0.5;
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn zero() -> impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static {
        |_: &[f64], _: &[f64], o: &mut [f64]| o.fill(0.0)
    }

    fn pt(v: &[f64]) -> OrthantPoint {
        OrthantPoint::new(v.to_vec()).unwrap()
    }

    fn decay() -> ModelSpec {
        ModelSpec::new(1, |x: &[f64], _: &[f64], o: &mut [f64]| o[0] = -x[0], zero())
            .with_initial(|x: &[f64], o: &mut [f64]| o.copy_from_slice(x))
    }

    #[test]
    fn constant_characteristics() {
        let spec = ModelSpec::new(2, zero(), zero()).with_initial(|x: &[f64], o: &mut [f64]| o.copy_from_slice(x));
        let tr = integrate_coupled(&spec, &pt(&[2.0, 1.0]), 1.0, 0.1).unwrap();
        for (y, v) in tr.y.iter().zip(&tr.v) {
            assert_eq!(y, &vec![2.0, 1.0]);
            assert_eq!(v, &vec![2.0, 1.0]);
        }
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn linear_value_growth() {
        let spec = ModelSpec::new(1, zero(), |x: &[f64], _: &[f64], o: &mut [f64]| o[0] = x[0])
            .with_initial(|_: &[f64], o: &mut [f64]| o.fill(0.0));
        let tr = integrate_coupled(&spec, &pt(&[2.0]), 1.0, 0.1).unwrap();
        assert_relative_eq!(tr.final_state().1[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn exponential_flow() {
        let tr = integrate_coupled(&decay(), &pt(&[1.0]), 1.0, 0.01).unwrap();
        let (y, v) = tr.final_state();
        assert_relative_eq!(y[0], (-1.0f64).exp(), epsilon = 1e-9);
        assert_relative_eq!(v[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn common_noise_is_unsupported() {
        let spec = decay().with_noise(0.5, nalgebra::DMatrix::identity(1, 1));
        assert!(matches!(integrate_coupled(&spec, &pt(&[1.0]), 1.0, 0.1), Err(Error::Unsupported(_))));
    }

    #[test]
    fn escape_is_reported_with_time() {
        let spec = ModelSpec::new(1, |_: &[f64], _: &[f64], o: &mut [f64]| o[0] = -1.0, zero())
            .with_initial(|_: &[f64], o: &mut [f64]| o.fill(0.0));
        match integrate_coupled(&spec, &pt(&[0.25]), 1.0, 0.1) {
            Err(Error::TrajectoryEscape { time, index, .. }) => {
                assert_eq!(index, 0);
                assert!(time > 0.25 && time < 0.45);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bvp_examples() {
        let spec = ModelSpec::new(2, zero(), zero()).with_initial(|x: &[f64], o: &mut [f64]| {
            o[0] = x[0] * x[1];
            o[1] = 3.0;
        });
        let sol = solve_bvp(&spec, &pt(&[2.0, 0.5]), 1.0, 0.1).unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.value, vec![1.0, 3.0]);

        let sol = solve_bvp(&decay(), &pt(&[1.0]), 1.0, 0.01).unwrap();
        assert_relative_eq!(sol.origin[0], std::f64::consts::E, epsilon = 1e-8);
        assert_relative_eq!(sol.value[0], std::f64::consts::E, epsilon = 1e-8);

        let grow = ModelSpec::new(2, zero(), |x: &[f64], _: &[f64], o: &mut [f64]| o.copy_from_slice(x))
            .with_initial(|x: &[f64], o: &mut [f64]| o.copy_from_slice(x));
        let sol = solve_bvp(&grow, &pt(&[1.0, 1.0]), 2.0, 0.1).unwrap();
        assert_relative_eq!(sol.value[0], 3.0, epsilon = 1e-10);
        assert_relative_eq!(sol.value[1], 3.0, epsilon = 1e-10);
    }

    #[test]
    fn bvp_converges_at_fourth_order() {
        let exact = std::f64::consts::E;
        let e1 = (solve_bvp(&decay(), &pt(&[1.0]), 1.0, 0.2).unwrap().value[0] - exact).abs();
        let e2 = (solve_bvp(&decay(), &pt(&[1.0]), 1.0, 0.1).unwrap().value[0] - exact).abs();
        let order = (e1 / e2).log2();
        assert!(order >= 3.5, "observed order {order}");
    }

    #[test]
    fn penalized_matches_coupled_when_inactive() {
        let spec = ModelSpec::new(1, |x: &[f64], _: &[f64], o: &mut [f64]| o[0] = -x[0], |_: &[f64], _: &[f64], o: &mut [f64]| o[0] = -1.0)
            .with_initial(|_: &[f64], o: &mut [f64]| o[0] = -0.5);
        let cfg = StoppingConfig::default();
        let a = integrate_coupled(&spec, &pt(&[1.0]), 1.0, 0.05).unwrap();
        let b = integrate_penalized(&spec, &cfg, &pt(&[1.0]), 1.0, 0.05, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn penalized_value_settles_at_eps_scale() {
        let g = 2.0;
        let spec = ModelSpec::new(1, zero(), move |_: &[f64], _: &[f64], o: &mut [f64]| o[0] = g)
            .with_initial(|_: &[f64], o: &mut [f64]| o[0] = 0.0);
        let cfg = StoppingConfig::default();
        for eps in [0.1, 0.05, 0.025] {
            let tr = integrate_penalized(&spec, &cfg, &pt(&[1.0]), 1.0, 1e-4, eps).unwrap();
            let v = tr.final_state().1[0];
            assert_relative_eq!(v, g * eps, max_relative = 1e-3);
            let peak = tr.v.iter().map(|v| v[0].max(0.0)).fold(0.0, f64::max);
            assert!(peak <= 1.01 * g * eps);
        }
    }
}
