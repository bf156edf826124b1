//! Run configuration: a TOML document where unknown keys are errors.
//!
//! Parsing fills every default explicitly, so the resolved document written next to the
//! artifacts reproduces the run on its own.

use std::path::PathBuf;

use mfgmaster::impulse::Cost;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Td,
    Stationary,
    Stopping,
    Impulse,
    EntryExit,
    Characteristics,
    Verify,
    Hypcheck,
    Reduce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Root of every random draw in the run.
    #[serde(default)]
    pub seed: Option<u64>,
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
    #[serde(default)]
    pub impulse: Option<ImpulseConfig>,
    #[serde(default)]
    pub characteristics: Option<CharacteristicsConfig>,
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", deny_unknown_fields)]
pub enum ModelConfig {
    #[serde(rename = "linear-test")]
    Linear(LinearConfig),
    #[serde(rename = "appendix-b")]
    Hamiltonian(HamiltonianConfig),
    #[serde(rename = "entry-exit")]
    EntryExit(EntryExitConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearConfig {
    /// `G = a x + b p + c`.
    pub a: Vec<Vec<f64>>,
    #[serde(default)]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub c: Option<Vec<f64>>,
    /// `F = m x`.
    #[serde(default)]
    pub m: Option<Vec<Vec<f64>>>,
    /// `U0 = q x + q0`.
    #[serde(default)]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub q0: Option<Vec<f64>>,
    #[serde(default)]
    pub discount: f64,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub lambda: f64,
    pub t: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialKind {
    Identity,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianConfig {
    /// `f(x) = cost_scale * x`.
    #[serde(default = "one")]
    pub cost_scale: f64,
    /// `H(q) = h_scale * q^2 / 2`.
    #[serde(default = "one")]
    pub h_scale: f64,
    #[serde(default = "identity")]
    pub initial: InitialKind,
    #[serde(default)]
    pub discount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryExitConfig {
    /// `g(K) = intercept + slope K`.
    #[serde(default = "one")]
    pub slope: f64,
    #[serde(default)]
    pub intercept: f64,
    pub b: f64,
    pub s: f64,
    pub r: f64,
    #[serde(default)]
    pub waive_increasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub d: usize,
    /// Radius of the truncated simplex; chosen from `g` for entry-exit when absent.
    #[serde(rename = "R", default)]
    pub radius: Option<f64>,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsSchedule {
    Levels(Vec<f64>),
    Geometric { first: f64, last: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub t_f: Option<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub eps: Option<EpsSchedule>,
    #[serde(default)]
    pub beta_prime_at_zero: f64,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    /// Keep every n-th time step in time-dependent output.
    #[serde(default = "one_usize")]
    pub store_every: usize,
    /// Skip hypothesis screens in the solvers.
    #[serde(default)]
    pub force: bool,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            dt: None,
            t_f: None,
            tol: default_tol(),
            eps: None,
            beta_prime_at_zero: 0.0,
            n_samples: default_samples(),
            store_every: 1,
            force: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Definition {
    Stationary,
    Td,
    Stopping,
    StoppingTd,
    Impulse,
    EntryExit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Inferred from the mode when absent.
    #[serde(default)]
    pub definition: Option<Definition>,
    pub tol: f64,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpulseConfig {
    /// Jump costs; `"inf"` forbids a jump.
    pub costs: Vec<Vec<Cost>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharacteristicsConfig {
    /// Terminal points `y0` of the characteristics.
    pub points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldFormat {
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "csv")]
    pub format: FieldFormat,
    /// Also write gnuplot columns for the field and certificate.
    #[serde(default)]
    pub plotdata: bool,
    /// Coordinates held fixed when plotting fields of dimension above two, as `[axis, value]`
    /// with 1-based axes.
    #[serde(default)]
    pub fix: Vec<(usize, f64)>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            format: FieldFormat::Csv,
            plotdata: false,
            fix: Vec::new(),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn identity() -> InitialKind {
    InitialKind::Identity
}

fn csv() -> FieldFormat {
    FieldFormat::Csv
}

fn default_tol() -> f64 {
    1e-8
}

fn default_samples() -> usize {
    1000
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.seed.get_or_insert(DEFAULT_SEED);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Internal(format!("cannot serialize config: {e}")))
    }

    pub fn grid(&self) -> Result<&GridConfig, CliError> {
        self.grid.as_ref().ok_or_else(|| bad("[grid] is required for this mode"))
    }

    pub fn dt(&self) -> Result<f64, CliError> {
        self.numerics.dt.ok_or_else(|| bad("numerics.dt is required for this mode"))
    }

    pub fn t_f(&self) -> Result<f64, CliError> {
        self.numerics.t_f.ok_or_else(|| bad("numerics.t_f is required for this mode"))
    }

    fn validate(&self) -> Result<(), CliError> {
        use Mode::*;
        let entry_exit = matches!(self.model, ModelConfig::EntryExit(_));
        if entry_exit != (self.mode == EntryExit) && !matches!(self.mode, Verify | Hypcheck) {
            return Err(bad("the entry-exit model runs only in entry-exit, verify and hypcheck modes"));
        }
        match self.mode {
            Td | Stationary | Stopping | Impulse | EntryExit | Reduce => {
                self.grid()?;
            }
            Characteristics => {
                if self.characteristics.is_none() {
                    return Err(bad("characteristics mode needs a [characteristics] section"));
                }
            }
            Verify => {
                if self.input.is_none() || self.verify.is_none() {
                    return Err(bad("verify mode needs `input` and a [verify] section"));
                }
            }
            Hypcheck => {}
        }
        if matches!(self.mode, Td | Characteristics) || (self.mode == Reduce && self.input.is_none()) {
            self.dt()?;
            self.t_f()?;
        }
        if matches!(self.mode, Stopping | EntryExit | Impulse) && self.numerics.eps.is_none() {
            return Err(bad("numerics.eps is required for this mode"));
        }
        if self.mode == Impulse && self.impulse.is_none() {
            return Err(bad("impulse mode needs an [impulse] section"));
        }
        if self.mode == Reduce && !matches!(self.model, ModelConfig::Hamiltonian(_)) {
            return Err(bad("reduce mode applies to the appendix-b model"));
        }
        if let Some(g) = &self.grid {
            if entry_exit && g.d != 1 {
                return Err(bad("the entry-exit grid is one-dimensional"));
            }
            if !entry_exit && g.radius.is_none() {
                return Err(bad("grid.R is required"));
            }
        }
        if self.numerics.store_every == 0 {
            return Err(bad("numerics.store_every must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
mode = "hypcheck"
[model]
name = "linear-test"
a = [[1.0, 0.0], [0.0, 1.0]]
"#;

    #[test]
    fn seed_is_defaulted_and_echoed() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.seed, Some(DEFAULT_SEED));
        let again = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            format!("{MINIMAL}tolerance = 1.0\n"),
            MINIMAL.replace("[model]", "[model]\nsped = 3"),
            format!("{MINIMAL}[numerics]\ntoll = 1e-3\n"),
        ] {
            assert!(matches!(RunConfig::parse(&text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn mode_requirements() {
        let td = MINIMAL.replace("hypcheck", "td");
        assert!(RunConfig::parse(&td).is_err());
        let td = format!("{td}[grid]\nd = 2\nR = 1.0\nh = 0.25\n[numerics]\ndt = 0.1\nt_f = 1.0\n");
        assert!(RunConfig::parse(&td).is_ok());
    }

    #[test]
    fn infinite_costs_parse() {
        let text = format!(
            "{}[grid]\nd = 2\nR = 1.0\nh = 0.25\n[numerics]\neps = [0.1]\n[impulse]\ncosts = [[0.0, 1.0], [\"inf\", 0.0]]\n",
            MINIMAL.replace("hypcheck", "impulse")
        );
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.impulse.unwrap().costs[1][0], Cost::Infinite);
    }
}
