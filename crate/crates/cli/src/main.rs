//! `srflab`: experiment runner.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 numerical blow-up
//! (outputs retained), 4 I/O failure, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use srflab_cli::config::ExperimentConfig;
use srflab_cli::io::{self, OutputDir};
use srflab_cli::{commands, CliError};

#[derive(Parser, Debug)]
#[command(
    name = "srflab",
    version,
    about = "Stochastic Ricci flow experiments on the flat torus"
)]
struct Cli {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `[output] dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `[run] seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replica / sample count (overrides `[run] replicas`).
    #[arg(long, global = true)]
    replicas: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Free-field samples and per-mode variances.
    SampleGff,
    /// Chaos measures: total masses, a density grid, scale diagnostic.
    BuildGmc,
    /// Flow trajectories with windowed drift/QV statistics.
    RunSrf,
    /// One-dimensional total-area diffusion against its closed forms.
    TotalMass,
    /// Integration-by-parts catalog.
    VerifyIbp,
    /// Drift and quadratic-variation regressions on flow trajectories.
    VerifyQv,
    /// Small-noise expansion refinement study.
    Expand,
    /// Print the effective configuration as TOML.
    PrintConfig,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::SampleGff => "sample-gff",
            Command::BuildGmc => "build-gmc",
            Command::RunSrf => "run-srf",
            Command::TotalMass => "total-mass",
            Command::VerifyIbp => "verify-ibp",
            Command::VerifyQv => "verify-qv",
            Command::Expand => "expand",
            Command::PrintConfig => "print-config",
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::parse(&std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(n) = cli.replicas {
        cfg.run.replicas = n;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load(cli)?;
    if let Command::PrintConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let workers = srflab::ensemble::configure_workers();
    let mut out = OutputDir::create(&cfg.output.dir)?;
    let mut blew_up = false;
    let summary = match cli.command {
        Command::SampleGff => commands::sample_gff(&cfg, &mut out),
        Command::BuildGmc => commands::build_gmc(&cfg, &mut out),
        Command::RunSrf => commands::run_srf(&cfg, &mut out).map(|(s, b)| {
            blew_up = b;
            s
        }),
        Command::TotalMass => commands::total_mass(&cfg, &mut out),
        Command::VerifyIbp => commands::verify_ibp(&cfg, &mut out),
        Command::VerifyQv => commands::verify_qv(&cfg, &mut out).map(|(s, b)| {
            blew_up = b;
            s
        }),
        Command::Expand => commands::expand(&cfg, &mut out),
        Command::PrintConfig => unreachable!(),
    }?;
    let sidecar = json!({
        "command": cli.command.name(),
        "version": io::version_string(),
        "seed": cfg.run.seed,
        "config": cfg,
        "outputs": out.files(),
        "summary": summary,
    });
    out.json("run.json", &sidecar)?;
    out.write_manifest()?;
    eprintln!(
        "{}: wrote {} files to {} ({workers} workers)",
        cli.command.name(),
        out.files().len(),
        cfg.output.dir
    );
    if blew_up {
        return Err(CliError::BlowUp("one or more trajectories blew up".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(e.exit_code())
        }
    }
}
