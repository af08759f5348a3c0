//! `linnet` — train small networks, extract their exact per-instance affine
//! form `W·x + b`, and use it for attribution, decomposition, and probing.
//!
//! Exit codes: 0 success, 2 usage error (bad flags or flag values), 1 runtime
//! failure. Diagnostics go to standard error.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

mod commands;

pub(crate) enum AppError {
    /// Bad flag values: exit code 2.
    Usage(String),
    /// Everything that fails at run time: exit code 1.
    Runtime(String),
}

impl AppError {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        AppError::Usage(msg.into())
    }

    pub(crate) fn runtime(msg: impl std::fmt::Display) -> Self {
        AppError::Runtime(msg.to_string())
    }
}

#[derive(Parser)]
#[command(name = "linnet", version, about = "Exact per-instance linear forms of feed-forward networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier with seeded minibatch SGD (softmax cross-entropy).
    Train {
        /// Model file to start from (a network, usually freshly initialized).
        #[arg(long)]
        model: PathBuf,
        /// IDX image file (decompressed).
        #[arg(long)]
        images: PathBuf,
        /// IDX label file (decompressed).
        #[arg(long)]
        labels: PathBuf,
        /// Where to write the trained model.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional training log (CSV: epoch,loss,accuracy).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train a 2-D parametric projection of a CSV dataset and dump
    /// projections plus per-sample attributions.
    Tsne {
        /// Headed CSV dataset.
        #[arg(long)]
        csv: PathBuf,
        #[arg(long = "label-column")]
        label_column: String,
        /// Network template (input dim must match the CSV features, output dim 2).
        #[arg(long = "model-template")]
        model_template: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 15.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 0.2)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Projection output (CSV: index,y0,y1,label).
        #[arg(long)]
        proj: PathBuf,
        /// Directory for per-sample attribution CSVs (both output dimensions).
        #[arg(long = "attrib-dir")]
        attrib_dir: Option<PathBuf>,
        /// Optional loss log (CSV: iter,loss).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write the exact affine form (W, b) of a model at one instance.
    Linearize {
        #[arg(long)]
        model: PathBuf,
        /// Instance CSV: one instance per row, features in flat layout, no header.
        #[arg(long)]
        input: PathBuf,
        /// Row of the instance file to use.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output JSON: { "W": [[...]], "b": [...], "residual": r }.
        #[arg(long)]
        out: PathBuf,
    },
    /// Attribution map for one instance and output class.
    Attribute {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output class the attribution explains.
        #[arg(long)]
        class: usize,
        /// PPM heatmap output path.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        /// Contribution CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// linear: exact W-row contributions; vg: gradient; ig: integrated gradients.
        #[arg(long, default_value = "linear")]
        method: String,
        #[arg(long = "ig-steps", default_value_t = 64)]
        ig_steps: usize,
        /// "zeros" or a path to a one-row instance CSV.
        #[arg(long, default_value = "zeros")]
        baseline: String,
    },
    /// Heatmaps and contributions of the strongest neurons of one layer.
    Neurons {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Layer whose neurons to rank.
        #[arg(long)]
        layer: usize,
        /// How many positive and negative neurons to emit.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Final output class the ranking is measured against.
        #[arg(long)]
        class: usize,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Accuracy and label-flip rates of F(x), W·x, and b over a dataset.
    Decompose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Output TSV report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Walk a ray from an instance to the edge of its linear region.
    Region {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// "random" or "coord:<j>".
        #[arg(long, default_value = "random")]
        direction: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reconstruction (and, for piecewise-linear networks, Jacobian) checks
    /// over sampled dataset inputs.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// How many inputs to sample.
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a fresh fully-connected model file with seeded symmetric init.
    Init {
        /// Layer widths, e.g. 784x300x100x10.
        #[arg(long)]
        arch: String,
        /// Activation between dense layers: relu, leaky_relu, elu, selu, gelu.
        #[arg(long, default_value = "relu")]
        activation: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { model, images, labels, out, epochs, lr, batch, seed, log } => {
            commands::train(&model, &images, &labels, &out, epochs, lr, batch, seed, log.as_deref())
        }
        Command::Tsne {
            csv,
            label_column,
            model_template,
            out,
            perplexity,
            iters,
            lr,
            seed,
            proj,
            attrib_dir,
            log,
        } => commands::tsne(
            &csv,
            &label_column,
            &model_template,
            &out,
            perplexity,
            iters,
            lr,
            seed,
            &proj,
            attrib_dir.as_deref(),
            log.as_deref(),
        ),
        Command::Linearize { model, input, index, out } => {
            commands::linearize(&model, &input, index, &out)
        }
        Command::Attribute {
            model,
            input,
            index,
            class,
            heatmap,
            csv,
            method,
            ig_steps,
            baseline,
        } => commands::attribute(
            &model,
            &input,
            index,
            class,
            heatmap.as_deref(),
            csv.as_deref(),
            &method,
            ig_steps,
            &baseline,
        ),
        Command::Neurons { model, input, index, layer, k, class, outdir } => {
            commands::neurons(&model, &input, index, layer, k, class, &outdir)
        }
        Command::Decompose { model, images, labels, out } => {
            commands::decompose(&model, &images, &labels, &out)
        }
        Command::Region { model, input, index, direction, seed } => {
            commands::region(&model, &input, index, &direction, seed)
        }
        Command::Verify { model, images, labels, n, seed } => {
            commands::verify(&model, &images, &labels, n, seed)
        }
        Command::Init { arch, activation, seed, out } => {
            commands::init(&arch, &activation, seed, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
