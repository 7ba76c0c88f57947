use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rwre_cli::{emit_summary, run, CliError, ExperimentKind};

#[derive(Parser)]
#[command(name = "rwre-lab", version, about = "Perturbed RWRE numerical lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Exact moments of the law and, with params.rho, conditions K1-K5.
    Moments(RunArgs),
    /// Killed Green's function and exit law in one sampled environment.
    Green(RunArgs),
    /// Kalikow environment and drift on a region.
    KalikowDrift(RunArgs),
    /// Minimum Kalikow drift over a family of sets.
    EpsK(RunArgs),
    /// Drift threshold comparison plus the eps_K probe.
    Theorem2(RunArgs),
    /// Kalikow drift on truncated half-spaces U+ and U-.
    Theorem3(RunArgs),
    /// Non-frontal exit probability from B_M.
    ConditionP(RunArgs),
    /// Mean of G_U[d.e1](0) on slabs.
    Prop31(RunArgs),
    /// Variance of G_U[d.e1](0) across amplitudes.
    Fluctuations(RunArgs),
    /// rho_B and rho_hat statistics.
    Rho(RunArgs),
    /// Annealed velocity estimate.
    Velocity(RunArgs),
    /// Freedman bound and simulated martingale tails.
    Freedman(RunArgs),
    /// Prints a pass/fail table over report files.
    Summary { reports: Vec<PathBuf> },
}

fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("RWRE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "RWRE_THREADS must be a positive integer, got `{v}`"
                ))
            }),
        Err(_) => Ok(None),
    }
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let (kind, args) = match cli.command {
        Command::Summary { reports } => {
            print!("{}", emit_summary(&reports)?);
            return Ok(());
        }
        Command::Moments(a) => (ExperimentKind::Moments, a),
        Command::Green(a) => (ExperimentKind::Green, a),
        Command::KalikowDrift(a) => (ExperimentKind::KalikowDrift, a),
        Command::EpsK(a) => (ExperimentKind::EpsK, a),
        Command::Theorem2(a) => (ExperimentKind::Theorem2, a),
        Command::Theorem3(a) => (ExperimentKind::Theorem3, a),
        Command::ConditionP(a) => (ExperimentKind::ConditionP, a),
        Command::Prop31(a) => (ExperimentKind::Prop31, a),
        Command::Fluctuations(a) => (ExperimentKind::Fluctuations, a),
        Command::Rho(a) => (ExperimentKind::Rho, a),
        Command::Velocity(a) => (ExperimentKind::Velocity, a),
        Command::Freedman(a) => (ExperimentKind::Freedman, a),
    };
    let out = run(kind, &args.config, args.seed, args.out.as_deref())?;
    println!("{}", out.report_path.display());
    for f in &out.files {
        println!("{}", f.display());
    }
    print!("{}", emit_summary(&[out.report_path])?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rwre-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
