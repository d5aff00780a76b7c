use std::path::PathBuf;
use std::process::ExitCode;

use bogodisp::config::{ExperimentConfig, ExperimentKind};
use bogodisp::experiment::run_experiment;
use clap::{Args, Parser, Subcommand};

/// Runs configured dispersion and Bogoliubov-flow experiments.
///
/// Exit status: 0 when every certificate passes, 1 when any fails, 2 on
/// invalid configuration or a failed run.
#[derive(Debug, Parser)]
#[command(name = "bogodisp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment configuration (sectioned key = value file)
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the configuration
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Condensate decay and conservation (kind hartree_decay)
    Hartree(RunArgs),
    /// Kernel-pair evolution (kinds sigma_dispersion, eta_bound, free_comparison, certificates)
    Flow(RunArgs),
    /// Projected interaction kernel norms and bounds (kind kernel_decay)
    Kernels(RunArgs),
    /// Few-mode Fock-space comparison (kind fock_oracle)
    Oracle(RunArgs),
    /// Any experiment, reporting its decay fits
    Fit(RunArgs),
    /// Any experiment, reporting its certificates
    Certify(RunArgs),
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Command::Hartree(a)
            | Command::Flow(a)
            | Command::Kernels(a)
            | Command::Oracle(a)
            | Command::Fit(a)
            | Command::Certify(a) => a,
        }
    }

    fn accepts(&self, kind: ExperimentKind) -> bool {
        match self {
            Command::Hartree(_) => kind == ExperimentKind::HartreeDecay,
            Command::Flow(_) => kind.uses_flow(),
            Command::Kernels(_) => kind == ExperimentKind::KernelDecay,
            Command::Oracle(_) => kind == ExperimentKind::FockOracle,
            Command::Fit(_) | Command::Certify(_) => true,
        }
    }
}

fn run(cli: &Cli) -> Result<bool, String> {
    let args = cli.command.args();
    let config = ExperimentConfig::load(&args.config).map_err(|e| e.to_string())?;
    if !cli.command.accepts(config.kind) {
        return Err(format!(
            "configuration field `kind`: experiment `{}` is not handled by this subcommand",
            config.kind.name()
        ));
    }
    let out = args
        .out
        .clone()
        .or_else(|| config.out.clone())
        .ok_or("no output directory: pass --out or set `out` in the configuration")?;
    let summary = run_experiment(&config, &out).map_err(|e| e.to_string())?;
    let text = summary.to_text();
    match &cli.command {
        Command::Fit(_) => {
            for f in &summary.fits {
                println!("{}", f.summary_line());
            }
            println!("{}", text.lines().last().unwrap_or_default());
        }
        Command::Certify(_) => {
            for line in text.lines().filter(|l| l.starts_with("certificate") || l.starts_with("all ")) {
                println!("{line}");
            }
        }
        _ => print!("{text}"),
    }
    Ok(summary.all_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
