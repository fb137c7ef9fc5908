//! `fde-dep`: batch front end over the solver, the dependence harness, the
//! convergence lab and the Fourier pipeline. JSON documents in, a report
//! directory out, the verdict in the exit code.
//!
//! Exit codes:
//!   0 — every verdict in the run passed;
//!   1 — at least one Refuted / Stalled / inconsistency outcome, or the run
//!       failed mid-flight; the reports are still written;
//!   2 — the input never made it to a run: usage, parse or validation error.
//!
//! Every run directory gets a `manifest.json` echoing the fully-resolved
//! configuration. Reruns with the same inputs and seed are byte-identical
//! across all report files; the manifest differs only in its one
//! `generated_at` line.

pub mod input;
pub mod pipeline;

use std::ffi::OsString;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use input::Overrides;
use pipeline::{RunError, RunOutput};

#[derive(Parser)]
#[command(name = "fde-dep", version, about = "Retarded functional differential equations: solve, perturb, audit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Integrate one problem and write the trajectory.
    Solve(RunArgs),
    /// Run the dependence battery over a perturbed family.
    Family(RunArgs),
    /// Drive Fourier partial sums of a periodic field as right-hand sides.
    Fourier(RunArgs),
    /// Check an explicit function sequence against the convergence notions.
    CheckSeq(RunArgs),
}

#[derive(Args)]
pub struct RunArgs {
    /// JSON run document.
    pub input: PathBuf,
    /// Report directory, created if missing.
    #[arg(short = 'o', long = "output", default_value = "out", value_name = "DIR")]
    pub output: PathBuf,
    /// Grid step override.
    #[arg(long = "h", value_name = "FLOAT")]
    pub h: Option<f64>,
    /// Fixed-point tolerance override.
    #[arg(long, value_name = "FLOAT")]
    pub tol: Option<f64>,
    /// Member / rung count override.
    #[arg(long = "k-max", value_name = "INT")]
    pub k_max: Option<usize>,
    /// Seed for the sampled audits.
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// Tube radius override.
    #[arg(long, value_name = "FLOAT")]
    pub radius: Option<f64>,
}

/// Full CLI entry point; never panics, returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; only real usage errors
            // are failures.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| dispatch(&cli))) {
        Ok(code) => code,
        Err(_) => {
            eprintln!("internal error: the run panicked; this is a bug");
            2
        }
    }
}

fn dispatch(cli: &Cli) -> i32 {
    let (name, args) = match &cli.command {
        Command::Solve(a) => ("solve", a),
        Command::Family(a) => ("family", a),
        Command::Fourier(a) => ("fourier", a),
        Command::CheckSeq(a) => ("check-seq", a),
    };
    let file = args.input.display().to_string();
    let text = match fs::read_to_string(&args.input) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{file}: {e}");
            return 2;
        }
    };
    let ovr = Overrides {
        h: args.h,
        tol: args.tol,
        k_max: args.k_max,
        radius: args.radius,
        seed: args.seed,
    };
    let out = match name {
        "solve" => pipeline::run_solve(&file, &text, &ovr),
        "family" => pipeline::run_family(&file, &text, &ovr),
        "fourier" => pipeline::run_fourier(&file, &text, &ovr),
        _ => pipeline::run_check_seq(&file, &text, &ovr),
    };
    match out {
        Ok(run) => emit(&args.output, name, &file, &run),
        Err(RunError::Input(e)) => {
            eprintln!("{e}");
            2
        }
        Err(RunError::Run { config, files, message }) => {
            if let Err(e) = write_reports(&args.output, name, &file, &config, &files) {
                eprintln!("{}: {e}", args.output.display());
                return 2;
            }
            eprintln!("{file}: {message}");
            1
        }
    }
}

fn emit(dir: &Path, name: &str, file: &str, run: &RunOutput) -> i32 {
    if let Err(e) = write_reports(dir, name, file, &run.config, &run.files) {
        eprintln!("{}: {e}", dir.display());
        return 2;
    }
    println!("{}", run.summary);
    let names: Vec<&str> = std::iter::once("manifest.json")
        .chain(run.files.iter().map(|(n, _)| *n))
        .collect();
    println!("reports in {} ({})", dir.display(), names.join(", "));
    if run.pass {
        0
    } else {
        1
    }
}

/// `generated_at` is the only line that may differ between reruns; the
/// pretty printer keeps it on a line of its own.
fn write_reports(
    dir: &Path,
    command: &str,
    input: &str,
    config: &Value,
    files: &[(&'static str, String)],
) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let generated_at =
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = json!({
        "command": command,
        "input": input,
        "generated_at": generated_at,
        "config": config,
    });
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    for (name, content) in files {
        fs::write(dir.join(name), content)?;
    }
    Ok(())
}
