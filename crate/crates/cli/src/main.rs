use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfgmaster_cli::plot::{emit_plotdata, SliceSpec};
use mfgmaster_cli::run::run_file;
use mfgmaster_cli::{CliError, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "mfgmaster", version, about = "Finite-state mean field game master equation solver")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a TOML config.
    Run { config: PathBuf },
    /// Write gnuplot columns for a field file or a certificate JSON.
    Plotdata {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Hold a coordinate fixed, as AXIS=VALUE with a 1-based axis.
        #[arg(long = "fix", value_parser = parse_fix)]
        fix: Vec<(usize, f64)>,
        /// Time slice index; the last one by default.
        #[arg(long)]
        time: Option<usize>,
        /// Single value component, 1-based.
        #[arg(long)]
        component: Option<usize>,
    },
}

fn parse_fix(s: &str) -> Result<(usize, f64), String> {
    let (a, v) = s.split_once('=').ok_or("expected AXIS=VALUE")?;
    Ok((a.trim().parse().map_err(|e| format!("{e}"))?, v.trim().parse().map_err(|e| format!("{e}"))?))
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run { config } => {
            let summary = run_file(&config)?;
            for p in &summary.artifacts {
                println!("wrote {}", p.display());
            }
            if summary.exit_code == 0 {
                println!("{}", summary.message);
            } else {
                eprintln!("{}", summary.message);
            }
            Ok(summary.exit_code)
        }
        Command::Plotdata {
            input,
            out,
            fix,
            time,
            component,
        } => {
            emit_plotdata(&input, &out, &SliceSpec { fix, time, component })?;
            println!("wrote {}", out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("usage: --workers must be at least 1");
            return ExitCode::from(EXIT_USAGE as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("internal: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
