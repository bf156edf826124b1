//! Problem data for a finite-state master equation posed on the positive orthant.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A vector field `(x, p) -> out` on orthant points and value vectors.
pub type CouplingFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Initial value map `x -> out`.
pub type InitialFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// One instance of the master equation
///
/// ```text
/// dU/dt + (F(x,U).grad) U + lambda (U - T* U(Tx)) = G(x,U)
/// r U   + (F(x,U).grad) U + lambda (U - T* U(Tx)) = G(x,U)
/// ```
///
/// `dynamics` is the density velocity `F`, `drift` the value rate `G`.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    d: usize,
    dynamics: CouplingFn,
    drift: CouplingFn,
    pub lambda: f64,
    pub noise_map: DMatrix<f64>,
    pub discount: f64,
    initial: Option<InitialFn>,
    pub radius: f64,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("lambda", &self.lambda)
            .field("discount", &self.discount)
            .field("radius", &self.radius)
            .field("has_initial", &self.initial.is_some())
            .finish()
    }
}

impl ModelSpec {
    /// Builds a spec with no common noise (`lambda = 0`, `T = Id`), `r = 1`, `R = 1`.
    pub fn new<F, G>(d: usize, dynamics: F, drift: G) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        G: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            name: "custom".into(),
            d,
            dynamics: Arc::new(dynamics),
            drift: Arc::new(drift),
            lambda: 0.0,
            noise_map: DMatrix::identity(d, d),
            discount: 1.0,
            initial: None,
            radius: 1.0,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_discount(mut self, r: f64) -> Self {
        self.discount = r;
        self
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = radius;
        self
    }

    pub fn with_noise(mut self, lambda: f64, t: DMatrix<f64>) -> Self {
        self.lambda = lambda;
        self.noise_map = t;
        self
    }

    pub fn with_initial<U>(mut self, u0: U) -> Self
    where
        U: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.initial = Some(Arc::new(u0));
        self
    }

    pub fn with_initial_arc(mut self, u0: InitialFn) -> Self {
        self.initial = Some(u0);
        self
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn has_initial(&self) -> bool {
        self.initial.is_some()
    }

    pub fn dynamics_fn(&self) -> &CouplingFn {
        &self.dynamics
    }

    pub fn drift_fn(&self) -> &CouplingFn {
        &self.drift
    }

    pub fn initial_fn(&self) -> Option<&InitialFn> {
        self.initial.as_ref()
    }

    /// Structural checks that hold for every use of the model.
    ///
    /// A noise map with a negative entry does not preserve the orthant and is
    /// rejected here rather than at solve time.
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidSpec("state count must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidSpec(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::InvalidSpec(format!("radius must be > 0, got {}", self.radius)));
        }
        if self.noise_map.nrows() != self.d || self.noise_map.ncols() != self.d {
            return Err(Error::InvalidSpec(format!(
                "noise map must be {d}x{d}, got {}x{}",
                self.noise_map.nrows(),
                self.noise_map.ncols(),
                d = self.d
            )));
        }
        if let Some((idx, v)) = self
            .noise_map
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0) || !v.is_finite())
        {
            return Err(Error::InvalidSpec(format!(
                "noise map entry {idx} = {v} is not a finite nonnegative number"
            )));
        }
        Ok(())
    }

    pub(crate) fn require_discount(&self) -> Result<()> {
        if self.discount > 0.0 && self.discount.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!(
                "stationary problems need r > 0, got {}",
                self.discount
            )))
        }
    }

    #[inline]
    pub fn dynamics_into(&self, x: &[f64], p: &[f64], out: &mut [f64]) {
        (self.dynamics)(x, p, out)
    }

    #[inline]
    pub fn drift_into(&self, x: &[f64], p: &[f64], out: &mut [f64]) {
        (self.drift)(x, p, out)
    }

    pub fn initial_value(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u0 = self
            .initial
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("model has no initial value map".into()))?;
        let mut out = vec![0.0; self.d];
        u0(x, &mut out);
        check_finite("U0", &out, x, &[])?;
        Ok(out)
    }

    /// `(T^* u)`: the adjoint of the noise map applied to a value vector.
    pub fn noise_adjoint(&self, u: &[f64], out: &mut [f64]) {
        let t = &self.noise_map;
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..self.d).map(|j| t[(j, i)] * u[j]).sum();
        }
    }

    pub fn noise_apply(&self, x: &[f64]) -> Vec<f64> {
        let t = &self.noise_map;
        (0..self.d)
            .map(|i| (0..self.d).map(|j| t[(i, j)] * x[j]).sum())
            .collect()
    }
}

/// Evaluates `(F(x,p), G(x,p))`, rejecting non-finite output.
pub fn eval_dynamics(spec: &ModelSpec, x: &OrthantPoint, p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = spec.dim();
    if x.dim() != d || p.len() != d {
        return Err(Error::InvalidArgument(format!(
            "expected vectors of length {d}, got x={} p={}",
            x.dim(),
            p.len()
        )));
    }
    let mut f = vec![0.0; d];
    let mut g = vec![0.0; d];
    spec.dynamics_into(x.as_slice(), p, &mut f);
    spec.drift_into(x.as_slice(), p, &mut g);
    check_finite("F", &f, x.as_slice(), p)?;
    check_finite("G", &g, x.as_slice(), p)?;
    Ok((f, g))
}

pub(crate) fn check_finite(component: &'static str, v: &[f64], x: &[f64], p: &[f64]) -> Result<()> {
    match v.iter().position(|c| !c.is_finite()) {
        None => Ok(()),
        Some(index) => Err(Error::ModelEvaluation {
            component,
            index,
            x: x.to_vec(),
            p: p.to_vec(),
        }),
    }
}

/// A point of the positive orthant: a nonnegative mass per state.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct OrthantPoint(Vec<f64>);

impl OrthantPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = coords.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("coordinate {i} = {v} is not in the orthant")));
        }
        Ok(Self(coords))
    }

    pub fn origin(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn mass(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for OrthantPoint {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
