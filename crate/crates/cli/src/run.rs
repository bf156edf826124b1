//! Mode dispatch and artifact writing.

use std::path::{Path, PathBuf};

use mfgmaster::characteristics::solve_bvp;
use mfgmaster::grid::{read_field, solve_stationary_with, solve_td_with, write_field_binary, write_field_csv};
use mfgmaster::grid::{StationaryOptions, TdOptions};
use mfgmaster::hypotheses::{check_boundary_invariance, check_discount, check_mass_bound, check_monotone};
use mfgmaster::impulse::{check_acyclic_jumps, solve_penalized_impulse, CostMatrix};
use mfgmaster::models::{entry_exit_limit, mass_conservation, reduce_field, reduced_model, verify_entry_exit};
use mfgmaster::stopping::{continuation_limit, StoppingConfig};
use mfgmaster::verify::{verify_impulse, verify_stationary, verify_stopping, verify_td, VerificationReport};
use mfgmaster::{Grid, GridField, HypothesisReport, ModelSpec, OrthantPoint, Sampler};
use serde::Serialize;
use std::sync::Arc;

use crate::config::{Definition, EpsSchedule, FieldFormat, Mode, ModelConfig, RunConfig};
use crate::plot::{entry_exit_columns, field_columns, stopping_columns, EntryExitCertificate, SliceSpec};
use crate::{models, CliError, EXIT_HYPOTHESIS, EXIT_OK, EXIT_VERIFY};

pub const RESOLVED_NAME: &str = "resolved.toml";

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
    /// One line for the terminal.
    pub message: String,
}

#[derive(Serialize)]
struct HypcheckReport<'a> {
    model: &'a str,
    seed: u64,
    passed: bool,
    reports: Vec<HypothesisReport>,
}

#[derive(Serialize)]
struct CharacteristicPoint {
    y0: Vec<f64>,
    #[serde(flatten)]
    solution: mfgmaster::characteristics::BvpSolution,
}

struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
    reproduce: String,
}

impl Artifacts {
    fn write(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, text)?;
        self.written.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
        self.write(name, &text)
    }

    fn field(&mut self, cfg: &RunConfig, field: &GridField) -> Result<(), CliError> {
        let path = match cfg.output.format {
            FieldFormat::Csv => {
                let p = self.dir.join("field.csv");
                write_field_csv(field, &p)?;
                p
            }
            FieldFormat::Binary => {
                let p = self.dir.join("field.bin");
                write_field_binary(field, &p)?;
                p
            }
        };
        self.written.push(path);
        if cfg.output.plotdata {
            let spec = SliceSpec {
                fix: cfg.output.fix.clone(),
                ..SliceSpec::default()
            };
            self.write("field.dat", &field_columns(field, &spec)?)?;
        }
        Ok(())
    }
}

fn schedule(cfg: &RunConfig) -> Result<StoppingConfig, CliError> {
    let base = match cfg.numerics.eps.as_ref() {
        Some(EpsSchedule::Levels(v)) => StoppingConfig {
            schedule: v.clone(),
            beta_prime_at_zero: 0.0,
        },
        Some(EpsSchedule::Geometric { first, last }) => StoppingConfig::geometric(*first, *last),
        None => return Err(CliError::Config("numerics.eps is required for this mode".into())),
    };
    Ok(base.with_beta_prime_at_zero(cfg.numerics.beta_prime_at_zero))
}

fn stationary_options(cfg: &RunConfig) -> StationaryOptions {
    StationaryOptions {
        force: cfg.numerics.force,
        ..StationaryOptions::default().with_tol(cfg.numerics.tol)
    }
}

fn td_options(cfg: &RunConfig) -> TdOptions {
    TdOptions {
        force: cfg.numerics.force,
        store_every: cfg.numerics.store_every,
        ..TdOptions::default()
    }
}

fn orthant_grid(cfg: &RunConfig) -> Result<Arc<Grid>, CliError> {
    let g = cfg.grid()?;
    let radius = g.radius.ok_or_else(|| CliError::Config("grid.R is required".into()))?;
    Ok(Arc::new(Grid::new(g.d, radius, g.h)?))
}

fn costs(cfg: &RunConfig) -> Result<CostMatrix, CliError> {
    let section = cfg
        .impulse
        .as_ref()
        .ok_or_else(|| CliError::Config("this run needs an [impulse] section".into()))?;
    Ok(CostMatrix::from_costs(section.costs.clone())?)
}

fn default_definition(mode: Mode) -> Option<Definition> {
    match mode {
        Mode::Stationary => Some(Definition::Stationary),
        Mode::Td | Mode::Reduce => Some(Definition::Td),
        Mode::Stopping => Some(Definition::Stopping),
        Mode::Impulse => Some(Definition::Impulse),
        Mode::EntryExit => Some(Definition::EntryExit),
        Mode::Characteristics | Mode::Verify | Mode::Hypcheck => None,
    }
}

fn verify_field(cfg: &RunConfig, field: &GridField, spec: &ModelSpec) -> Result<Option<VerificationReport>, CliError> {
    let Some(v) = &cfg.verify else { return Ok(None) };
    let definition = v
        .definition
        .or_else(|| default_definition(cfg.mode))
        .ok_or_else(|| CliError::Config("verify.definition is required in verify mode".into()))?;
    let seed = cfg.seed();
    let (n, tol) = (v.n_samples, v.tol);
    let report = match definition {
        Definition::Stationary => verify_stationary(field, spec, n, tol, seed)?,
        Definition::Td => verify_td(field, spec, n, tol, seed)?,
        Definition::Stopping => verify_stopping(field, spec, n, tol, seed, false)?,
        Definition::StoppingTd => verify_stopping(field, spec, n, tol, seed, true)?,
        Definition::Impulse => verify_impulse(field, spec, &costs(cfg)?, n, tol, seed)?,
        Definition::EntryExit => {
            let ModelConfig::EntryExit(e) = &cfg.model else {
                return Err(CliError::Config("entry-exit verification needs the entry-exit model".into()));
            };
            let radius = cfg.grid.as_ref().and_then(|g| g.radius);
            verify_entry_exit(field, &models::entry_exit(e, radius), n, tol, seed)?
        }
    };
    Ok(Some(report))
}

fn finish_with_report(
    art: &mut Artifacts,
    report: Option<VerificationReport>,
    done: String,
) -> Result<(i32, String), CliError> {
    let Some(report) = report else { return Ok((EXIT_OK, done)) };
    let report = report.with_reproduction(art.reproduce.clone());
    art.json("report.json", &report)?;
    if report.passed {
        Ok((EXIT_OK, format!("{done}; {} verification passed (worst margin {:e})", report.definition, report.worst_margin)))
    } else {
        let witness = report
            .witness
            .as_ref()
            .map(|w| format!(" at x0={:?}", w.x0))
            .unwrap_or_default();
        Ok((
            EXIT_VERIFY,
            format!(
                "{done}; {} verification failed: clause {}, worst margin {:e}{witness}",
                report.definition,
                report.clause.as_deref().unwrap_or("inequality"),
                report.worst_margin
            ),
        ))
    }
}

fn hypcheck(cfg: &RunConfig, spec: &ModelSpec, art: &mut Artifacts) -> Result<(i32, String), CliError> {
    let radius = cfg.grid.as_ref().and_then(|g| g.radius).unwrap_or(spec.radius);
    let sampler = Sampler::new(cfg.seed(), cfg.numerics.n_samples, radius);
    let mut reports = vec![
        check_boundary_invariance(spec, &sampler, None)?,
        check_mass_bound(&spec.clone().with_radius(radius), &sampler)?,
        check_monotone(spec, &sampler)?,
    ];
    if spec.discount > 0.0 {
        reports.push(check_discount(spec, &sampler)?);
    }
    if matches!(cfg.model, ModelConfig::Hamiltonian(_)) {
        reports.push(mass_conservation(spec, &sampler)?);
    }
    if cfg.impulse.is_some() {
        reports.push(check_acyclic_jumps(&costs(cfg)?));
    }
    let passed = reports.iter().all(|r| r.verdict.passed());
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.verdict.passed())
        .map(|r| r.hypothesis.clone())
        .collect();
    art.json(
        "report.json",
        &HypcheckReport {
            model: &spec.name,
            seed: cfg.seed(),
            passed,
            reports,
        },
    )?;
    if passed {
        Ok((EXIT_OK, "all hypothesis checks passed".into()))
    } else {
        Ok((EXIT_HYPOTHESIS, format!("hypothesis checks failed: {}", failed.join(", "))))
    }
}

/// Executes one run and writes its artifacts under `output.dir`.
///
/// Solver and usage failures surface as `Err`; verification and hypothesis failures are
/// ordinary outcomes with nonzero exit codes.
pub fn run(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir)?;
    let resolved = dir.join(RESOLVED_NAME);
    let mut art = Artifacts {
        reproduce: format!("mfgmaster run {}", resolved.display()),
        dir,
        written: Vec::new(),
    };
    art.write(RESOLVED_NAME, &cfg.to_toml()?)?;
    let spec = models::build(cfg)?;

    let (exit_code, message) = match cfg.mode {
        Mode::Hypcheck => hypcheck(cfg, &spec, &mut art)?,
        Mode::Td => {
            let field = solve_td_with(&spec, &orthant_grid(cfg)?, cfg.t_f()?, cfg.dt()?, td_options(cfg))?;
            art.field(cfg, &field)?;
            let report = verify_field(cfg, &field, &spec)?;
            finish_with_report(&mut art, report, format!("solved to t = {}", cfg.t_f()?))?
        }
        Mode::Stationary => {
            let field = solve_stationary_with(&spec, &orthant_grid(cfg)?, stationary_options(cfg), None)?;
            art.field(cfg, &field)?;
            let report = verify_field(cfg, &field, &spec)?;
            finish_with_report(&mut art, report, "stationary solve converged".into())?
        }
        Mode::Stopping => {
            let res = continuation_limit(&spec, &orthant_grid(cfg)?, &schedule(cfg)?, stationary_options(cfg))?;
            art.field(cfg, &res.field)?;
            art.json("certificate.json", &res.certificate)?;
            if cfg.output.plotdata {
                art.write("certificate.dat", &stopping_columns(&res.certificate))?;
            }
            let mut done = format!("continuation finished at eps = {}", schedule(cfg)?.last_eps());
            if let Some(w) = &res.certificate.warning {
                done = format!("{done} ({w})");
            }
            let report = verify_field(cfg, &res.field, &spec)?;
            finish_with_report(&mut art, report, done)?
        }
        Mode::Impulse => {
            let eps = *schedule(cfg)?
                .schedule
                .last()
                .ok_or_else(|| CliError::Config("numerics.eps is empty".into()))?;
            let (field, alpha) = solve_penalized_impulse(&spec, &costs(cfg)?, &orthant_grid(cfg)?, eps, stationary_options(cfg))?;
            art.field(cfg, &field)?;
            art.write("alpha.csv", &alpha.to_csv())?;
            let report = verify_field(cfg, &field, &spec)?;
            finish_with_report(&mut art, report, format!("penalized impulse solve converged at eps = {eps}"))?
        }
        Mode::EntryExit => {
            let ModelConfig::EntryExit(e) = &cfg.model else {
                unreachable!("validated: entry-exit mode has the entry-exit model")
            };
            let g = cfg.grid()?;
            let ee = models::entry_exit(e, g.radius);
            let res = entry_exit_limit(&ee, g.h, &schedule(cfg)?, stationary_options(cfg))?;
            art.field(cfg, &res.field)?;
            let cert = EntryExitCertificate {
                levels: res.levels,
                gradient: res.gradient,
            };
            art.json("certificate.json", &cert)?;
            if cfg.output.plotdata {
                art.write("certificate.dat", &entry_exit_columns(&cert))?;
            }
            let report = verify_field(cfg, &res.field, &spec)?;
            let done = format!(
                "entry-exit limit on K in [0, {}]; gradient {} within bound {}",
                res.field.grid().radius(),
                cert.gradient.observed,
                cert.gradient.bound
            );
            finish_with_report(&mut art, report, done)?
        }
        Mode::Characteristics => {
            let points = &cfg.characteristics.as_ref().expect("validated").points;
            let mut out = Vec::with_capacity(points.len());
            for y0 in points {
                let y = OrthantPoint::new(y0.clone())?;
                out.push(CharacteristicPoint {
                    y0: y0.clone(),
                    solution: solve_bvp(&spec, &y, cfg.t_f()?, cfg.dt()?)?,
                });
            }
            art.json("characteristics.json", &out)?;
            (EXIT_OK, format!("{} characteristics solved", out.len()))
        }
        Mode::Verify => {
            let input = cfg.input.as_ref().expect("validated");
            let field = read_field(input).map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
            let report = verify_field(cfg, &field, &spec)?;
            finish_with_report(&mut art, report, format!("verified {}", input.display()))?
        }
        Mode::Reduce => {
            let full = match &cfg.input {
                Some(p) => read_field(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
                None => solve_td_with(&spec, &orthant_grid(cfg)?, cfg.t_f()?, cfg.dt()?, td_options(cfg))?,
            };
            let reduced = reduce_field(&full)?;
            art.field(cfg, &reduced)?;
            let report = verify_field(cfg, &reduced, &reduced_model(&spec)?)?;
            finish_with_report(&mut art, report, format!("reduced to {} simplex coordinates", reduced.grid().dim()))?
        }
    };
    Ok(RunSummary {
        exit_code,
        artifacts: art.written,
        message,
    })
}

/// Reads and runs a config file.
pub fn run_file(path: &Path) -> Result<RunSummary, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    run(&RunConfig::parse(&text)?)
}
