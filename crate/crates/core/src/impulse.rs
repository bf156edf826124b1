//! Impulse control: jumps between states at cost `k_ij`.
//!
//! The jump operator `(Mp)^i = min_{j != i} (k_ij + p^j)` defines the obstacle
//! `U <= MU`; the penalized equation adds the reaction `(1/eps)(U^i - M^i U)_+` and
//! moves the jumping mass with the proportions `alpha_ij`.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grid::{Engine, Grid, GridField, Penalty, StationaryOptions};
use crate::hypotheses::{check_monotone, HypothesisReport, Verdict, Witness};
use crate::model::ModelSpec;
use crate::sampling::Sampler;

/// A jump cost; infinity (jump forbidden) is a variant, not a large float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cost {
    Finite(f64),
    Infinite,
}

impl Cost {
    pub fn from_f64(v: f64) -> Self {
        if v == f64::INFINITY {
            Cost::Infinite
        } else {
            Cost::Finite(v)
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Cost::Finite(v) => Some(v),
            Cost::Infinite => None,
        }
    }
}

impl Serialize for Cost {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Cost::Finite(v) => s.serialize_f64(*v),
            Cost::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Cost {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v.is_nan() => Err(serde::de::Error::custom("jump cost is NaN")),
            Raw::Num(v) => Ok(Cost::from_f64(v)),
            Raw::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "Infinity" | "+inf") => Ok(Cost::Infinite),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unknown jump cost {t:?}"))),
        }
    }
}

/// Jump costs `k_ij`; the diagonal is never used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    rows: Vec<Vec<Cost>>,
}

impl CostMatrix {
    /// Every jump forbidden.
    pub fn forbidden(d: usize) -> Self {
        Self {
            rows: vec![vec![Cost::Infinite; d]; d],
        }
    }

    /// From rows of floats, `f64::INFINITY` meaning forbidden.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("cost matrix must be square".into()));
        }
        if rows.iter().flatten().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(Error::InvalidArgument("jump costs must be numbers or +inf".into()));
        }
        Ok(Self {
            rows: rows.into_iter().map(|r| r.into_iter().map(Cost::from_f64).collect()).collect(),
        })
    }

    pub fn from_costs(rows: Vec<Vec<Cost>>) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("cost matrix must be square".into()));
        }
        if rows.iter().flatten().any(|c| matches!(c, Cost::Finite(v) if !v.is_finite())) {
            return Err(Error::InvalidArgument("finite jump costs must be finite numbers".into()));
        }
        Ok(Self { rows })
    }

    pub fn with(mut self, i: usize, j: usize, cost: f64) -> Self {
        self.rows[i][j] = Cost::from_f64(cost);
        self
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Cost {
        self.rows[i][j]
    }

    /// Finite off-diagonal edges `(i, j, k_ij)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows.iter().enumerate().flat_map(|(i, r)| {
            r.iter()
                .enumerate()
                .filter(move |(j, _)| *j != i)
                .filter_map(move |(j, c)| c.finite().map(|v| (i, j, v)))
        })
    }

    pub fn all_forbidden(&self) -> bool {
        self.edges().next().is_none()
    }
}

/// `(Mp)^i = min_{j != i} (k_ij + p^j)`, `+inf` when row `i` forbids every jump.
pub fn jump_operator(k: &CostMatrix, p: &[f64]) -> Vec<f64> {
    let d = k.dim();
    (0..d)
        .map(|i| {
            (0..d)
                .filter(|&j| j != i)
                .filter_map(|j| k.get(i, j).finite().map(|c| c + p[j]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// No jump chain returns to its start, and every allowed jump has positive cost.
/// Exact: depth-first search over the finite-cost edges.
pub fn check_acyclic_jumps(k: &CostMatrix) -> HypothesisReport {
    let fail = |detail: String| HypothesisReport {
        hypothesis: "acyclic-jumps".into(),
        verdict: Verdict::Fail,
        margin: -1.0,
        tolerance: 0.0,
        samples: 0,
        witness: Some(Witness::note(detail)),
    };
    if let Some((i, j, c)) = k.edges().find(|(_, _, c)| *c <= 0.0) {
        return fail(format!("nonpositive cost k[{}][{}] = {c}", i + 1, j + 1));
    }
    if let Some(cycle) = find_cycle(k) {
        let path: Vec<String> = cycle.iter().map(|i| (i + 1).to_string()).collect();
        return fail(format!("jump cycle [{}]", path.join(",")));
    }
    HypothesisReport {
        hypothesis: "acyclic-jumps".into(),
        verdict: Verdict::PassExact,
        margin: k.edges().map(|(_, _, c)| c).fold(f64::INFINITY, f64::min).min(1.0),
        tolerance: 0.0,
        samples: 0,
        witness: None,
    }
}

/// A directed cycle of finite-cost jumps as a closed vertex list, if any.
pub fn find_cycle(k: &CostMatrix) -> Option<Vec<usize>> {
    let d = k.dim();
    let mut color = vec![0u8; d];
    let mut stack: Vec<usize> = Vec::new();
    fn visit(k: &CostMatrix, v: usize, color: &mut [u8], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
        color[v] = 1;
        stack.push(v);
        for w in (0..k.dim()).filter(|&w| w != v && k.get(v, w).finite().is_some()) {
            if color[w] == 1 {
                let start = stack.iter().position(|&s| s == w).expect("gray vertex is on the stack");
                let mut cycle = stack[start..].to_vec();
                cycle.push(w);
                return Some(cycle);
            }
            if color[w] == 0 {
                if let Some(c) = visit(k, w, color, stack) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        color[v] = 2;
        None
    }
    (0..d).find_map(|v| if color[v] == 0 { visit(k, v, &mut color, &mut stack) } else { None })
}

/// Largest `V <= W` with `V <= MV`, by the sweeps `V <- min(V, MV)`.
///
/// Without jump cycles every improving chain is a simple path, so at most `d` sweeps change `V`.
pub fn m_envelope(k: &CostMatrix, w: &[f64]) -> Result<Vec<f64>> {
    let d = k.dim();
    let mut v = w.to_vec();
    for _ in 0..=d {
        let mv = jump_operator(k, &v);
        let next: Vec<f64> = v.iter().zip(&mv).map(|(a, b)| a.min(*b)).collect();
        if next == v {
            return Ok(v);
        }
        v = next;
    }
    Err(Error::Internal(
        "jump envelope not stationary after d sweeps; the cost matrix has a jump cycle".into(),
    ))
}

/// Jump proportions `alpha_ij` in `[0, 1]`, row sums at most one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaMatrix {
    d: usize,
    entries: Vec<f64>,
}

impl AlphaMatrix {
    pub fn zeros(d: usize) -> Self {
        Self {
            d,
            entries: vec![0.0; d * d],
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.d + j]
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.entries[i * self.d..(i + 1) * self.d].iter().sum()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }
}

/// Proportions at a value vector: row `i` vanishes when `U^i < M^i U - tol`,
/// otherwise mass one spread uniformly over `argmin_j (k_ij + U^j)` within `tol`.
pub fn alpha_at(k: &CostMatrix, u: &[f64], tol: f64) -> AlphaMatrix {
    let d = k.dim();
    let mu = jump_operator(k, u);
    let mut a = AlphaMatrix::zeros(d);
    for i in 0..d {
        if !mu[i].is_finite() || u[i] < mu[i] - tol {
            continue;
        }
        let targets: Vec<usize> = (0..d)
            .filter(|&j| j != i)
            .filter(|&j| k.get(i, j).finite().is_some_and(|c| c + u[j] <= mu[i] + tol))
            .collect();
        let share = 1.0 / targets.len() as f64;
        for j in targets {
            a.entries[i * d + j] = share;
        }
    }
    a
}

/// [`alpha_at`] at the interpolated value `U(x)` of the field's last slice.
pub fn alpha_from_value(k: &CostMatrix, field: &GridField, x: &[f64], tol: f64) -> Result<AlphaMatrix> {
    let u = field.interpolate(field.n_slices() - 1, x)?;
    Ok(alpha_at(k, &u, tol))
}

/// Proportions per grid node.
#[derive(Debug, Clone)]
pub struct AlphaField {
    grid: Arc<Grid>,
    /// Node-major `d x d` blocks.
    values: Vec<f64>,
}

impl AlphaField {
    pub fn at(&self, node: usize) -> AlphaMatrix {
        let dd = self.grid.dim() * self.grid.dim();
        AlphaMatrix {
            d: self.grid.dim(),
            entries: self.values[node * dd..(node + 1) * dd].to_vec(),
        }
    }

    /// Columns `node,i,j,alpha` (1-based states) for nonzero entries.
    pub fn to_csv(&self) -> String {
        let d = self.grid.dim();
        let mut out = String::from("node,i,j,alpha\n");
        for n in 0..self.grid.len() {
            for i in 0..d {
                for j in 0..d {
                    let a = self.values[(n * d + i) * d + j];
                    if a != 0.0 {
                        let _ = writeln!(out, "{n},{},{},{a}", i + 1, j + 1);
                    }
                }
            }
        }
        out
    }
}

/// Mass moved per unit time by jumps, as a velocity: state `j` gains
/// `(1/eps)(x_j sum_k alpha_jk - sum_i x_i alpha_ij)`; components sum to zero.
pub fn redistribution(alpha: &[f64], x: &[f64], inv_eps: f64, v: &mut [f64]) {
    let d = x.len();
    for j in 0..d {
        let out: f64 = (0..d).map(|k| alpha[j * d + k]).sum::<f64>() * x[j];
        let inflow: f64 = (0..d).map(|i| x[i] * alpha[i * d + j]).sum();
        v[j] += inv_eps * (out - inflow);
    }
}

const ALPHA_TOL: f64 = 1e-9;
const ALPHA_DAMPING: f64 = 0.5;
const CHATTER_SWEEPS: usize = 50;

struct ImpulsePenalty<'a> {
    k: &'a CostMatrix,
    d: usize,
    inv_eps: f64,
    alpha: Vec<f64>,
    obstacle: Vec<f64>,
    signatures: Vec<(u64, usize)>,
    period_two: usize,
}

impl ImpulsePenalty<'_> {
    fn active_signature(&self) -> (u64, usize) {
        let mut hasher = DefaultHasher::new();
        let mut count = 0;
        for (idx, &a) in self.alpha.iter().enumerate() {
            if a > 0.0 {
                idx.hash(&mut hasher);
                count += 1;
            }
        }
        (hasher.finish(), count)
    }
}

impl Penalty for ImpulsePenalty<'_> {
    fn refresh(&mut self, grid: &Grid, u: &[f64]) -> Result<()> {
        let d = self.d;
        let k = self.k;
        let targets: Vec<(Vec<f64>, Vec<f64>)> = (0..grid.len())
            .into_par_iter()
            .map(|n| {
                let un = &u[n * d..(n + 1) * d];
                (jump_operator(k, un), alpha_at(k, un, ALPHA_TOL).entries)
            })
            .collect();
        for (n, (mu, target)) in targets.into_iter().enumerate() {
            self.obstacle[n * d..(n + 1) * d].copy_from_slice(&mu);
            for (a, t) in self.alpha[n * d * d..(n + 1) * d * d].iter_mut().zip(&target) {
                // a zero target switches the row off at once
                *a = if *t == 0.0 { 0.0 } else { ALPHA_DAMPING * *a + (1.0 - ALPHA_DAMPING) * t };
            }
        }
        let sig = self.active_signature();
        let len = self.signatures.len();
        if len >= 2 && self.signatures[len - 2] == sig && self.signatures[len - 1] != sig {
            self.period_two += 1;
        } else {
            self.period_two = 0;
        }
        if self.period_two >= CHATTER_SWEEPS {
            return Err(Error::Chattering {
                first: sig.1,
                second: self.signatures[len - 1].1,
            });
        }
        self.signatures.push(sig);
        if self.signatures.len() > 4 {
            self.signatures.remove(0);
        }
        Ok(())
    }

    fn inv_eps(&self) -> f64 {
        self.inv_eps
    }

    fn add_velocity(&self, node: usize, x: &[f64], _u: &[f64], v: &mut [f64]) {
        let dd = self.d * self.d;
        redistribution(&self.alpha[node * dd..(node + 1) * dd], x, self.inv_eps, v);
    }

    fn obstacle(&self, node: usize, comp: usize, _u: &[f64]) -> Option<f64> {
        let m = self.obstacle[node * self.d + comp];
        m.is_finite().then_some(m)
    }
}

/// Stationary penalized impulse equation by false transient, with damped
/// re-selection of `alpha` every sweep.
pub fn solve_penalized_impulse(
    spec: &ModelSpec,
    k: &CostMatrix,
    grid: &Arc<Grid>,
    eps: f64,
    opts: StationaryOptions,
) -> Result<(GridField, AlphaField)> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    if k.dim() != spec.dim() {
        return Err(Error::InvalidArgument("cost matrix and model dimensions differ".into()));
    }
    spec.require_discount()?;
    let engine = Engine::new(spec, grid, None, "impulse")?;
    if !opts.force {
        let acyclic = check_acyclic_jumps(k);
        if acyclic.verdict == Verdict::Fail {
            return Err(Error::HypothesisRefused {
                module: "impulse",
                hypothesis: acyclic.hypothesis,
                margin: acyclic.margin,
            });
        }
        crate::grid::solve::screen(spec, grid, "impulse", true)?;
        let mono = check_monotone(spec, &Sampler::new(0x1a9u64, 512, grid.radius()))?;
        if mono.verdict == Verdict::Fail {
            return Err(Error::HypothesisRefused {
                module: "impulse",
                hypothesis: mono.hypothesis,
                margin: mono.margin,
            });
        }
    }
    let d = grid.dim();
    let mut pen = ImpulsePenalty {
        k,
        d,
        inv_eps: 1.0 / eps,
        alpha: vec![0.0; grid.len() * d * d],
        obstacle: vec![f64::INFINITY; grid.len() * d],
        signatures: Vec::new(),
        period_two: 0,
    };
    let u = engine.relax(vec![0.0; grid.len() * d], Some(&mut pen), opts.relax())?;
    let field = GridField::new(grid.clone(), vec![0.0], vec![u])?;
    let alpha = AlphaField {
        grid: grid.clone(),
        values: pen.alpha,
    };
    Ok((field, alpha))
}

/// Largest violation of `U <= MU` over the nodes of a slice.
pub fn obstacle_violation(k: &CostMatrix, field: &GridField, slice: usize) -> f64 {
    let d = field.grid().dim();
    field
        .slice(slice)
        .chunks(d)
        .map(|u| {
            let mu = jump_operator(k, u);
            u.iter().zip(&mu).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}
