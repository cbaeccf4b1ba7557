mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::Usage;

#[derive(Debug, Parser)]
#[command(name = "latent-bridge", version, about = "Disentangled identity/attribute transfer through a frozen generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum NetKind {
    Identity,
    Keypoints,
    EvalEmbedder,
    Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Block {
    Identity,
    Attribute,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train one frozen perception network and save it to its configured path.
    Pretrain {
        kind: NetKind,
        #[command(flatten)]
        common: Common,
    },
    /// Train the attribute encoder, mapper and W discriminator.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train without the W discriminator and its adversarial losses.
        #[arg(long)]
        disable_w_discriminator: bool,
        /// Train without the landmark loss.
        #[arg(long)]
        disable_landmark_loss: bool,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the total iteration count.
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Score a checkpoint on held-out pairs; with a baseline, also run the W-space PCA study.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score (default: `<out_dir>/final.lbck`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Checkpoint of the run trained without the W discriminator.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Number of held-out pairs (default: `eval_pairs` from the config).
        #[arg(long)]
        pairs: Option<usize>,
        /// Evaluation seed (default: the master seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit figure data as images and point files.
    Figures {
        #[command(subcommand)]
        kind: Figure,
    },
}

#[derive(Debug, Args)]
struct FigureCommon {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to render with (default: `<out_dir>/final.lbck`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory (default: `<out_dir>/figures/<kind>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sampling seed (default: the master seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Figure {
    /// Every identity input combined with every attribute input.
    Grid {
        #[command(flatten)]
        fig: FigureCommon,
        #[arg(long, default_value_t = 3)]
        ids: usize,
        #[arg(long, default_value_t = 3)]
        attrs: usize,
    },
    /// Straight-line interpolation in W between two inferred latents.
    InterpW {
        #[command(flatten)]
        fig: FigureCommon,
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// Interpolation of one block of z with the other held fixed.
    InterpZ {
        #[command(flatten)]
        fig: FigureCommon,
        /// The block that stays fixed.
        #[arg(long, value_enum, default_value_t = Block::Identity)]
        block: Block,
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// Two-component PCA of generator, model and baseline latents.
    Pca {
        #[command(flatten)]
        fig: FigureCommon,
        /// Checkpoint of the run trained without the W discriminator.
        #[arg(long)]
        baseline: PathBuf,
        /// Samples per space (default: `pca_samples` from the config).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// One identity driven through a head-turn-and-talk trajectory.
    Sequence {
        #[command(flatten)]
        fig: FigureCommon,
        #[arg(long, default_value_t = 60)]
        frames: usize,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use latent_bridge::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::InvalidInput(_) | E::EmptyRequest(_) | E::InsufficientSamples { .. } => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
