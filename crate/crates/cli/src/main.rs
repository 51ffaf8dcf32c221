//! `metafuse`: synthetic data, training, evaluation, gradient checks and
//! saliency maps from the command line.
//!
//! Exit codes: 0 success, 1 invalid input, 2 numeric check failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "metafuse", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        /// Dataset spec JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the resolved config, history and checkpoints.
    Train {
        /// Run config JSON; every key is optional.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; overrides the config's data section.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split and write a JSON report plus ROC CSVs.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Run config JSON; defaults to FG-Tiny. Without an explicit fusion
        /// mode all three are checked.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = metafuse_core::gradcheck::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = metafuse_core::gradcheck::DEFAULT_MAX_COORDS)]
        max_coords: usize,
        /// Flip the sign of one primitive's backward rule.
        #[arg(long, hide = true)]
        sabotage: Option<String>,
    },
    /// Write a GradCAM heatmap for one image.
    Saliency {
        #[arg(long)]
        model: PathBuf,
        /// 8-bit PGM image.
        #[arg(long)]
        image: PathBuf,
        /// Inline metadata, e.g. `age=10,sex=M`.
        #[arg(long)]
        meta: Option<String>,
        /// Target class; defaults to the predicted one.
        #[arg(long = "class")]
        class: Option<usize>,
        /// Output prefix for `<prefix>.pgm`, `<prefix>.csv` and the S2-resolution maps.
        #[arg(long)]
        out: PathBuf,
    },
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
    let result = match cli.command {
        Command::Synth { spec, out } => commands::synth(&spec, &out),
        Command::Train { config, data, out } => commands::train(&config, data.as_deref(), &out),
        Command::Eval { model, data, split, report } => commands::eval(&model, &data, &split, &report),
        Command::Gradcheck { config, tol, seed, max_coords, sabotage } => {
            commands::gradcheck(config.as_deref(), tol, seed, max_coords, sabotage)
        }
        Command::Saliency { model, image, meta, class, out } => {
            commands::saliency(&model, &image, meta.as_deref(), class, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
