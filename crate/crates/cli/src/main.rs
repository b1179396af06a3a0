use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowlab_cli::{commands, CliError, Options, Source};

#[derive(Parser)]
#[command(name = "flowlab", version, about = "Flow-matching discontinuity experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the velocity network and write checkpoint.bin and loss.csv.
    Train(Common),
    /// Dump a velocity field over the grid at one time.
    Field(Common),
    /// Transport prior particles and write trajectories and endpoints.
    Sample(Common),
    /// Jump and posterior profiles, continuity residuals, error band.
    Profile(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    source: Option<Source>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    t: Option<f64>,
    /// Output root, replacing the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("FLOWLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Input(format!("FLOWLAB_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cli: Cli) -> Result<String, CliError> {
    configure_threads()?;
    let (cmd, c): (fn(&std::path::Path, &Options) -> Result<String, CliError>, Common) = match cli.command {
        Command::Train(c) => (commands::train, c),
        Command::Field(c) => (commands::field, c),
        Command::Sample(c) => (commands::sample, c),
        Command::Profile(c) => (commands::profile, c),
    };
    let opts = Options {
        source: c.source,
        checkpoint: c.checkpoint,
        t: c.t,
        out: c.out,
        seed: c.seed,
    };
    cmd(&c.config, &opts)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("flowlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
