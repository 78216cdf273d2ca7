use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sal_cli::{evaluate, fit, localize, synth_cmd};

/// Attention localization and two-stage classification over cascaded PCA
/// feature units.
#[derive(Parser)]
#[command(name = "sal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ten-class shapes dataset in the binary batch
    /// format, for runs without the real dataset.
    Synth {
        /// Output directory for the batch files.
        #[arg(long)]
        out: PathBuf,
        /// Training images per class.
        #[arg(long, default_value_t = 1200)]
        per_class: usize,
        /// Test images per class.
        #[arg(long, default_value_t = 200)]
        test_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pixel noise level.
        #[arg(long, default_value_t = 30.0)]
        noise: f32,
    },
    /// Fit the localization pipeline and the stage-1 classifier.
    Fit {
        /// Dataset directory holding the binary batch files.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for models and the config echo.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reduced-scale preset: 1000 train / 200 test per class, fewer
        /// boosting rounds.
        #[arg(long)]
        smoke: bool,
    },
    /// Localize every test image with a previously fitted pipeline.
    Localize {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding pipeline.bin; box records go here too.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        smoke: bool,
        /// Also write a four-panel PNG per image.
        #[arg(long)]
        viz: bool,
    },
    /// Run a named experiment: table1, table2, or pairs.
    Evaluate {
        experiment: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        smoke: bool,
        /// Class pairs as `a:b,c:d`; defaults depend on the experiment.
        #[arg(long)]
        pairs: Option<String>,
        /// Confusion-set counts to resolve, e.g. `25,45`.
        #[arg(long)]
        resolved_sets: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { out, per_class, test_per_class, seed, noise } => {
            synth_cmd::run(out, *per_class, *test_per_class, *seed, *noise)
        }
        Command::Fit { data, out, seed, smoke } => fit::run(data, out, *seed, *smoke),
        Command::Localize { data, out, seed, smoke, viz } => {
            localize::run(data, out, *seed, *smoke, *viz)
        }
        Command::Evaluate { experiment, data, out, seed, smoke, pairs, resolved_sets } => {
            evaluate::run(&evaluate::EvalArgs {
                experiment,
                data,
                out,
                seed: *seed,
                smoke: *smoke,
                pairs: pairs.as_deref(),
                resolved_sets: resolved_sets.as_deref(),
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
