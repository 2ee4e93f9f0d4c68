use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use barrier_shift::scenario::{self, StageFailure};
use clap::{Parser, Subcommand};

/// Shifted-barrier scenarios: simulate, certify, export level sets.
#[derive(Parser, Debug)]
#[command(name = "barrier-shift", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Closed-loop run; writes trajectory.csv and report.json.
    Run {
        file: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the scenario step size.
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Sampled certificates only, no simulation.
    Certify { file: PathBuf },
    /// Level curves `{b = -lambda}` as CSV.
    Levelsets {
        file: PathBuf,
        /// Comma-separated shift values; may be empty.
        #[arg(long, default_value = "", allow_hyphen_values = true)]
        lambdas: String,
        #[arg(long, default_value_t = 720)]
        n_points: usize,
        /// Written to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Barrier descriptor of the scenario's CLF as JSON.
    Clf2cbf { file: PathBuf },
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c.clamp(0, 255) as u8)
}

/// Stdout writes that tolerate a closed pipe.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn fail(f: &StageFailure) -> ExitCode {
    emit(&(serde_json::to_string_pretty(f).expect("failure serializes") + "\n"));
    code(f.exit_code)
}

fn parse_lambdas(text: &str) -> Result<Vec<f64>, StageFailure> {
    text.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.parse::<f64>()
                .map_err(|e| StageFailure::new(scenario::Stage::Parse, format!("--lambdas `{v}`: {e}")))
        })
        .collect()
}

fn execute(cmd: Command) -> Result<ExitCode, StageFailure> {
    match cmd {
        Command::Run { file, out, dt } => {
            let s = scenario::load(&file)?;
            let run = scenario::run(&s, dt)?;
            run.write(&out)?;
            for w in &run.report.warnings {
                eprintln!("warning: {w}");
            }
            match &run.report.failure {
                Some(f) => Ok(fail(f)),
                None => {
                    let inv = run.report.invariance.as_ref();
                    emit(&format!(
                        "ok: {} steps, min B = {}, artifacts in {}\n",
                        run.report.simulation.steps,
                        inv.map_or(f64::NAN, |r| r.min_b),
                        out.display()
                    ));
                    Ok(ExitCode::SUCCESS)
                }
            }
        }
        Command::Certify { file } => {
            let s = scenario::load(&file)?;
            let rep = scenario::certify(&s)?;
            emit(&(serde_json::to_string_pretty(&rep).expect("report serializes") + "\n"));
            Ok(code(rep.exit_code()))
        }
        Command::Levelsets {
            file,
            lambdas,
            n_points,
            out,
        } => {
            let lambdas = parse_lambdas(&lambdas)?;
            let s = scenario::load(&file)?;
            let (csv, warnings) = scenario::export_levelsets(&s, &lambdas, n_points)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            match out {
                Some(p) => std::fs::write(&p, csv)
                    .map_err(|e| StageFailure::new(scenario::Stage::Io, format!("{}: {e}", p.display())))?,
                None => emit(&csv),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Clf2cbf { file } => {
            let s = scenario::load(&file)?;
            let out = scenario::clf2cbf(&s)?;
            emit(&(serde_json::to_string_pretty(&out).expect("descriptor serializes") + "\n"));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(c) => c,
        Err(f) => fail(&f),
    }
}
