use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use aniso_cli::config::ExperimentConfig;
use aniso_cli::output::write_outcome;
use aniso_cli::runner::{constants_csv, constants_text, ledger_for};
use aniso_cli::{run, RunOptions, Status, StudyKind};
use aniso_core::BasisKind;

#[derive(Parser)]
#[command(name = "aniso", version, about = "Anisotropic singular perturbation studies")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Comma-separated ε values, replacing `study.epsilons`.
    #[arg(long, global = true, value_delimiter = ',')]
    epsilon_list: Option<Vec<f64>>,
    /// Basis for both factors, or `kind1,kind2`.
    #[arg(long, global = true, value_delimiter = ',')]
    basis: Option<Vec<BasisKind>>,
    /// Output directory, replacing `output.directory`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the study named in the config.
    Run { config: PathBuf },
    Solve {
        config: PathBuf,
        /// Writes the target solution on the output lattice as `x1,x2,u`.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    RateStudy { config: PathBuf },
    CeaCheck { config: PathBuf },
    ApCheck { config: PathBuf },
    DqCheck { config: PathBuf },
    ResolventStudy { config: PathBuf },
    SemigroupStudy { config: PathBuf },
    ParabolicStudy { config: PathBuf },
    /// Prints the constant ledger with formulas.
    Constants { config: PathBuf },
}

fn load(path: &Path, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(e) = &o.epsilon_list {
        cfg.study.epsilons = e.clone();
    }
    match o.basis.as_deref() {
        None => {}
        Some([b]) => {
            cfg.discretization.basis1 = *b;
            cfg.discretization.basis2 = *b;
        }
        Some([b1, b2]) => {
            cfg.discretization.basis1 = *b1;
            cfg.discretization.basis2 = *b2;
        }
        Some(_) => bail!("--basis takes one or two kinds"),
    }
    if let Some(out) = &o.out {
        cfg.output.directory = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ANISO_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("ANISO_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("ANISO_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<Status> {
    configure_threads()?;
    let (path, kind, export) = match cli.command {
        Command::Constants { config } => {
            let cfg = load(&config, &cli.overrides)?;
            let ledger = ledger_for(&cfg)?.context("constants need a time-independent source")?;
            print!("{}", constants_text(&ledger));
            let dir = PathBuf::from(&cfg.output.directory);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("constants.csv"), constants_csv(&ledger))?;
            return Ok(Status::Pass);
        }
        Command::Run { config } => (config, None, None),
        Command::Solve { config, export } => (config, Some(StudyKind::Solve), export),
        Command::RateStudy { config } => (config, Some(StudyKind::Rate), None),
        Command::CeaCheck { config } => (config, Some(StudyKind::Cea), None),
        Command::ApCheck { config } => (config, Some(StudyKind::Ap), None),
        Command::DqCheck { config } => (config, Some(StudyKind::Dq), None),
        Command::ResolventStudy { config } => (config, Some(StudyKind::Resolvent), None),
        Command::SemigroupStudy { config } => (config, Some(StudyKind::Semigroup), None),
        Command::ParabolicStudy { config } => (config, Some(StudyKind::Parabolic), None),
    };
    let cfg = load(&path, &cli.overrides)?;
    let opts = RunOptions { export: export.clone() };
    let outcome = run(&cfg, kind, &opts)?;
    let dir = PathBuf::from(&cfg.output.directory);
    write_outcome(&cfg, &dir, &outcome)?;
    if let (Some(path), Some(body)) = (&export, &outcome.export) {
        std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    match (&outcome.status, &outcome.refusal) {
        (Status::Refused, Some(r)) => {
            eprintln!("refused: {} is missing hypotheses: {}", r.study, r.missing.join(", "));
        }
        (status, _) => eprintln!("{}: {:?}", outcome.kind.name(), status),
    }
    Ok(outcome.status)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(status) => ExitCode::from(status.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
