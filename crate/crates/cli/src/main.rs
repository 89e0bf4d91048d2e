mod commands;
mod error;
mod settings;

use clap::{Parser, Subcommand};

use error::CliError;
use settings::Settings;

#[derive(Parser)]
#[command(name = "refinelm", version, about = "Bias measurement and top-k refine-layer training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate templates and prompt variants for a lexicon split.
    Gen {
        #[command(flatten)]
        settings: Settings,
        /// Print counts without writing the manifest.
        #[arg(long)]
        counts_only: bool,
    },
    /// Measure positional/attributive error and bias intensity.
    Measure(Settings),
    /// Train the refine layer.
    Train(Settings),
    /// Specified-question and multiple-choice accuracy.
    Eval(Settings),
    /// Per-group bias charts from report files.
    Report(Settings),
}

fn run(command: Command) -> Result<(), CliError> {
    let (settings, counts_only) = match &command {
        Command::Gen { settings, counts_only } => (settings.clone(), *counts_only),
        Command::Measure(s) | Command::Train(s) | Command::Eval(s) | Command::Report(s) => {
            (s.clone(), false)
        }
    };
    let s = settings.resolve()?;
    let jobs = s.jobs.unwrap_or(0);
    refinelm::par::with_jobs(jobs, || match command {
        Command::Gen { .. } => commands::gen(&s, counts_only),
        Command::Measure(_) => commands::measure(&s),
        Command::Train(_) => commands::train(&s),
        Command::Eval(_) => commands::eval(&s),
        Command::Report(_) => commands::report(&s),
    })
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprint!("{e}");
        if !matches!(e, CliError::Misses(_)) {
            eprintln!();
        }
        std::process::exit(e.code());
    }
}
