use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use contrast_lab_cli::{parse_config, run_command, CliError, Command, EXIT_ERROR};

/// Experiments on two-encoder contrastive learning: training, oracle
/// verification, theory probes and width sweeps.
#[derive(Debug, Parser)]
#[command(name = "contrast-lab", version)]
struct Args {
    command: CommandArg,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (takes precedence over `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated probe names (overrides `probes`).
    #[arg(long, value_delimiter = ',')]
    probes: Option<Vec<String>>,
    /// Comma-separated hidden widths for `sweep` (overrides `m_grid`).
    #[arg(long = "m-grid", value_delimiter = ',')]
    m_grid: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CommandArg {
    Train,
    Verify,
    Probe,
    Sweep,
}

impl From<CommandArg> for Command {
    fn from(c: CommandArg) -> Self {
        match c {
            CommandArg::Train => Command::Train,
            CommandArg::Verify => Command::Verify,
            CommandArg::Probe => Command::Probe,
            CommandArg::Sweep => Command::Sweep,
        }
    }
}

const THREADS_VAR: &str = "CONTRAST_LAB_THREADS";

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = value.trim().parse().ok().filter(|&t| t > 0).ok_or_else(|| CliError::Config {
        field: THREADS_VAR.into(),
        message: format!("expected a positive integer, got {value:?}"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Parse(format!("{THREADS_VAR}: {e}")))
}

fn run(args: Args) -> Result<i32, CliError> {
    configure_threads()?;
    let source = std::fs::read_to_string(&args.config)?;
    let mut config = parse_config(&source)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(probes) = args.probes {
        config.probes = probes;
    }
    if let Some(grid) = args.m_grid {
        if !matches!(args.command, CommandArg::Sweep) {
            return Err(CliError::Config {
                field: "m-grid".into(),
                message: "--m-grid only applies to sweep".into(),
            });
        }
        config.m_grid = grid;
    }
    config.validate()?;
    let out = args.out.unwrap_or_else(|| PathBuf::from(&config.out_dir));
    let outcome = run_command(args.command.into(), &config, &out)?;
    print!("{}", outcome.summary);
    for path in &outcome.artifacts {
        println!("wrote {}", path.display());
    }
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
