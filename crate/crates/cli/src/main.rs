mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// A usage or configuration problem (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "rotfeat",
    version,
    about = "Rotation-equivariant local features"
)]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for every random stream (training, RANSAC, probes).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Less log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    quiet: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VariantArg {
    Pooled,
    Unpooled,
    PostPoolCnn,
}

impl From<VariantArg> for rotfeat::network::Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Pooled => Self::Pooled,
            VariantArg::Unpooled => Self::Unpooled,
            VariantArg::PostPoolCnn => Self::PostPoolCnn,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EncodingArg {
    Base64,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    /// Regular features before pooling.
    Backbone,
    /// Pooled features (after any post-pool layers).
    Pooled,
    /// Normalized descriptors.
    Descriptors,
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Reject checkpoints of a different group order.
    #[arg(long)]
    group_order: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct ExtractArgs {
    #[arg(long)]
    max_keypoints: Option<usize>,
    #[arg(long)]
    nms_radius: Option<usize>,
    /// Resize inputs to WIDTHxHEIGHT first (e.g. 300x300).
    #[arg(long, value_parser = parse_size)]
    resize: Option<[usize; 2]>,
}

#[derive(Args, Debug, Default)]
pub struct RansacArgs {
    /// RANSAC inlier threshold in pixels.
    #[arg(long)]
    ransac_threshold: Option<f64>,
    #[arg(long)]
    ransac_iters: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on synthetic pairs and write a checkpoint.
    Train {
        /// Checkpoint to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step loss CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        group_order: Option<usize>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Write keypoints and descriptors of one image.
    Extract {
        image: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        extract: ExtractArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Descriptor blob: inline base64 or a raw float32 sidecar.
        #[arg(long, value_enum, default_value = "base64")]
        encoding: EncodingArg,
    },
    /// Match two images (mutual nearest neighbours) into a correspondence file.
    Match {
        image_a: PathBuf,
        image_b: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        extract: ExtractArgs,
        #[command(flatten)]
        ransac: RansacArgs,
        /// RANSAC-verify and record inliers.
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ensemble two correspondence files and RANSAC-filter the result.
    Ensemble {
        first: PathBuf,
        second: PathBuf,
        #[arg(long)]
        keep_fraction: Option<f64>,
        #[command(flatten)]
        ransac: RansacArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rotated-pair MMA over an HPatches-style sequence tree.
    EvalMma {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated rotation angles in degrees.
        #[arg(long, value_delimiter = ',')]
        angles: Option<Vec<f64>>,
        /// Angle grid 0, step, ... below 360 (ignored with --angles).
        #[arg(long)]
        angle_step: Option<f64>,
        /// Comma-separated pixel thresholds.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[command(flatten)]
        extract: ExtractArgs,
        /// RANSAC-filter matches before scoring.
        #[arg(long)]
        ransac: bool,
        #[command(flatten)]
        ransac_params: RansacArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report format (default: from the output extension, else json).
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Place-recognition recall by most-inlier retrieval.
    EvalVpr {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        tolerance: Option<usize>,
        #[command(flatten)]
        extract: ExtractArgs,
        #[command(flatten)]
        ransac: RansacArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the equivariance deviation of a checkpoint for every rotation.
    CheckEquivariance {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value = "descriptors")]
        stage: StageArg,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        /// Uniform noise inputs instead of band-limited ones.
        #[arg(long)]
        noise: bool,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("invalid dimension {v:?}"))
    };
    Ok([parse(w)?, parse(h)?])
}

/// 1 for usage/config, 2 for bad input data, 3 for internal failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    use rotfeat::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if let Some(e) = err.downcast_ref::<E>() {
        return match e {
            E::InvalidArgument(_) => 1,
            E::Io { .. }
            | E::Format { .. }
            | E::Json(_)
            | E::Checkpoint(_)
            | E::Degenerate(_)
            | E::PointAtInfinity { .. }
            | E::NoModel(_) => 2,
            E::ShapeMismatch { .. } | E::FieldTypeMismatch { .. } | E::NonFinite { .. } => 3,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 2;
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Skip causes whose text the outer message already includes.
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
