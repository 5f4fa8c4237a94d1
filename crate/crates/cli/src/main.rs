//! `evf`: generate data, train, evaluate, sweep, gradient-check and export
//! masks. Set `EVF_LOG` (e.g. `debug`, `warn`) to change log verbosity.

mod axes;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use evf_core::data::Difficulty;
use evf_core::Error;

#[derive(Parser)]
#[command(name = "evf", version, about = "Text-prompted segmentation toolkit")]
struct Cli {
    /// Print the default run configuration as JSON and exit.
    #[arg(long)]
    dump_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DifficultyArg {
    AttributesOnly,
    Spatial,
}

impl From<DifficultyArg> for Difficulty {
    fn from(d: DifficultyArg) -> Self {
        match d {
            DifficultyArg::AttributesOnly => Difficulty::AttributesOnly,
            DifficultyArg::Spatial => Difficulty::Spatial,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic referring-segmentation dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: usize,
        /// Canvas side in pixels.
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long, value_enum, default_value = "spatial")]
        difficulty: DifficultyArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write checkpoint, log and validation metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        /// Data section source; defaults to the checkpoint's own config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// Also write metrics.json and metrics.txt here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train every combination of the given axes for each seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `fusion=text-only,early-full;representation=text_cls;freeze=TFT,TTT`,
        /// or a JSON object with the same keys.
        #[arg(long)]
        axes: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients block by block.
    Gradcheck {
        /// `all`, `attention`, `multiway`, `projector`, `decoder` or `losses`.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = evf_core::gradcheck::DEFAULT_CONFIGURATIONS)]
        configurations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Segment one image for one expression.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary PPM (P6).
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        text: String,
        /// Mask path (P5 PGM); the RLE goes next to it with a `.json` extension.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
    },
}

/// Why a command failed, mapped onto the exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
    Acceptance(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_)
            | Error::Diverged { .. }
            | Error::Shape { .. }
            | Error::Contract(_)
            | Error::Generation(_) => Failure::Runtime(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EVF_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match (cli.dump_defaults, cli.command) {
        (true, _) => {
            println!("{}", evf_core::config::RunConfig::default().to_json());
            Ok(())
        }
        (false, Some(cmd)) => run(cmd),
        (false, None) => Err(Failure::Usage("a subcommand or --dump-defaults is required".into())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Runtime(m) => (1, m),
                Failure::Usage(m) => (2, m),
                Failure::Acceptance(m) => (3, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData {
            seed,
            n,
            size,
            difficulty,
            out,
        } => commands::gen_data(seed, n, size, difficulty.into(), &out),
        Command::Train {
            config,
            out_dir,
            resume,
        } => commands::train(config.as_deref(), &out_dir, resume.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            split,
            out_dir,
        } => commands::eval(
            config.as_deref(),
            &checkpoint,
            matches!(split, Split::Train),
            out_dir.as_deref(),
        ),
        Command::Ablate {
            config,
            axes,
            seeds,
            out_dir,
        } => commands::ablate(config.as_deref(), &axes, &seeds, out_dir.as_deref()),
        Command::Gradcheck {
            scope,
            configurations,
            seed,
            json,
        } => commands::gradcheck(&scope, configurations, seed, json),
        Command::Predict {
            checkpoint,
            image,
            text,
            out,
            threshold,
        } => commands::predict(&checkpoint, &image, &text, &out, threshold),
    }
}
