//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::experiments::{run as run_experiment, RunOptions};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "dpot", version, about = "Learn optimal-transport maps from unpaired samples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Non-uniform to uniform on a square.
    Square(Common),
    /// Ellipse to ellipse, optionally conditioned on the target shape.
    Ellipse(Common),
    /// Two separated half disks onto a disk.
    Disjoint(Common),
    /// Forward and inverse maps between two mixtures.
    Inverse(Common),
    /// Posterior sampling for the compartmental epidemic model.
    Csir(Common),
    /// Palette transfer between two images.
    ColorTransfer(Common),
    /// Solver, gradient and gap-identity oracle checks.
    OracleTests(OracleArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config; the bundled desk-scale config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Validate the config and print the resolved parameters only.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Desk-scale config text bundled for each experiment id.
pub fn bundled(experiment: &str) -> Option<&'static str> {
    Some(match experiment {
        "square" => include_str!("../configs/square_desk.cfg"),
        "ellipse" => include_str!("../configs/ellipse_desk.cfg"),
        "disjoint" => include_str!("../configs/disjoint_desk.cfg"),
        "inverse" => include_str!("../configs/inverse_desk.cfg"),
        "csir" => include_str!("../configs/csir_desk.cfg"),
        "color-transfer" => include_str!("../configs/color_desk.cfg"),
        _ => return None,
    })
}

/// Parses arguments, runs, prints and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let (id, common) = match cli.command {
        Command::OracleTests(a) => return oracle_tests(a.seed),
        Command::Square(c) => ("square", c),
        Command::Ellipse(c) => ("ellipse", c),
        Command::Disjoint(c) => ("disjoint", c),
        Command::Inverse(c) => ("inverse", c),
        Command::Csir(c) => ("csir", c),
        Command::ColorTransfer(c) => ("color-transfer", c),
    };
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::parse(bundled(id).expect("bundled config for every experiment"))?,
    };
    if cfg.experiment != id {
        return Err(CliError::Usage(format!(
            "config is for `{}`, not `{id}`",
            cfg.experiment
        )));
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    if common.dry_run {
        print!("{}", cfg.parameter_table());
        return Ok(());
    }
    let opts = RunOptions {
        out: common.out.clone(),
        threads: common.threads,
    };
    let m = run_experiment(&cfg, &opts)?;
    for (k, v) in &m.summary {
        println!("{k}\t{v}");
    }
    println!("wrote {} files to {}", m.files.len() + 1, common.out.display());
    Ok(())
}

fn oracle_tests(seed: u64) -> Result<(), CliError> {
    let results = crate::checks::all(seed);
    for r in &results {
        println!("{}", r.line());
    }
    match results.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        n => Err(CliError::Numeric(format!("{n} oracle check(s) failed"))),
    }
}
