/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// `print!` that ignores a closed stdout.
macro_rules! say_raw {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

mod commands;
mod config;
mod error;
mod scene;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Report;
use crate::config::{Config, KeyArgs};
use crate::error::CliError;

/// Quasi-Fresnel transform reconstruction for confocal non-line-of-sight imaging.
///
/// Settings come from an optional `key = value` file (`--config`); any flag
/// with the same name overrides the file.
#[derive(Debug, Parser)]
#[command(name = "qfnlos", version)]
struct Cli {
    /// Plain-text `key = value` configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Cap on worker threads
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print stage timings as a `stage,name,seconds` CSV block
    #[arg(long = "timing-csv", global = true)]
    timing_csv: bool,

    #[command(flatten)]
    keys: KeyArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a surfel scene to a histogram file, optionally also an event file
    Render,
    /// Write the aggregated fields at s and s + ds
    Aggregate,
    /// Reconstruct albedo and depth from a histogram or event file
    Reconstruct,
    /// Render a scene in memory and reconstruct it
    Pipeline,
    /// Reconstruct once per s and summarize in sweep.csv
    Sweep {
        /// Comma-separated s values
        #[arg(long = "s-list", value_delimiter = ',', required = true, allow_hyphen_values = true)]
        s_list: Vec<f64>,
    },
    /// Time and account memory across grid sizes
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "fdh")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// CSV destination; slopes go next to it as `<stem>.slopes.csv`
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rewrite a pixel-major histogram file as time-major
    Transpose { src: PathBuf, dst: PathBuf },
    /// Run one size and check the memory ledger against its caps
    Audit {
        #[arg(long, default_value_t = 512)]
        n: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads {n}: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    cfg.apply_flags(&cli.keys);
    let report = Report {
        timing_csv: cli.timing_csv,
    };
    match cli.command {
        Command::Render => commands::render(&cfg),
        Command::Aggregate => commands::aggregate(&cfg),
        Command::Reconstruct => commands::reconstruct(&cfg, report),
        Command::Pipeline => commands::pipeline(&cfg, report),
        Command::Sweep { s_list } => commands::sweep(&cfg, &s_list, report),
        Command::Bench {
            modes,
            sizes,
            repeats,
            out,
        } => commands::bench(&cfg, &modes, &sizes, repeats, cli.threads, out.as_deref()),
        Command::Transpose { src, dst } => commands::transpose(&src, &dst),
        Command::Audit { n } => commands::audit(&cfg, n),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
