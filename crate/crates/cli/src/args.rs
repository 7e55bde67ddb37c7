use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sevi_lab::align::{MixDomain, Mode};
use sevi_lab::metrics::{ChairConvention, Pooling};

#[derive(Debug, Parser)]
#[command(
    name = "sevi-lab",
    version,
    about = "Attention alignment experiments on a toy multimodal decoder"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Model config JSON, or a lab config with `model`, `align`, `contrast`,
    /// `generation`, `prompt` and `seed` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Image seed; also seeds the sampler.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Report path. The manifest is written next to it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
    #[arg(long, global = true)]
    pub kappa: Option<f64>,
    /// Smoothing strength; `grid` takes a comma-separated list.
    #[arg(long, global = true, value_delimiter = ',')]
    pub omega: Vec<f64>,
    /// First aligned layer; `grid` takes a comma-separated list.
    #[arg(long, global = true, value_delimiter = ',')]
    pub start_layer: Vec<usize>,
    #[arg(long, global = true)]
    pub mix_domain: Option<MixDomain>,
    /// Enable contrastive decoding against a second image.
    #[arg(long, global = true)]
    pub contrast: bool,
    #[arg(long, global = true)]
    pub neg_seed: Option<u64>,
    #[arg(long, global = true)]
    pub alpha_cap: Option<f64>,
    #[arg(long, global = true)]
    pub convention: Option<ChairConvention>,
    #[arg(long, global = true)]
    pub pooling: Option<Pooling>,
    /// Comma-separated prompt token ids.
    #[arg(long, global = true, value_delimiter = ',')]
    pub prompt: Option<Vec<u32>>,
    #[arg(long, global = true)]
    pub max_new_tokens: Option<usize>,
    #[arg(long, global = true)]
    pub greedy: bool,
    #[arg(long, global = true)]
    pub top_p: Option<f64>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Vision-to-vision and vision-to-text rollout per layer (CSV).
    AnalyzeFlow,
    /// Divergence caused by hiding the image from a given layer on (CSV).
    ProbeMask {
        /// Comma-separated 1-based layers; defaults to every layer plus
        /// `num_layers + 1`.
        #[arg(long, value_delimiter = ',')]
        mask_layers: Vec<usize>,
    },
    /// Decode tokens and write the per-step trace (JSON lines).
    Generate,
    /// Hallucination scores over an omega by start-layer grid (CSV).
    Grid {
        /// Ground truth, one entry per generated caption.
        #[arg(long)]
        truths: PathBuf,
    },
    /// CHAIR scores and object recall (JSON).
    EvalChair {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        truths: PathBuf,
    },
    /// AMBER generative scores (JSON).
    EvalAmber {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        truths: PathBuf,
    },
    /// CAPTURE scene-graph scores (JSON).
    EvalCapture {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Peak-to-mass ratio of each semantic head's final-row attention (CSV).
    StatsPeaks,
    /// Write the model weights as a raw dump plus JSON index.
    DumpParams,
    /// Re-run the command recorded in a manifest.
    Replay { manifest: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::AnalyzeFlow => "analyze-flow",
            Self::ProbeMask { .. } => "probe-mask",
            Self::Generate => "generate",
            Self::Grid { .. } => "grid",
            Self::EvalChair { .. } => "eval-chair",
            Self::EvalAmber { .. } => "eval-amber",
            Self::EvalCapture { .. } => "eval-capture",
            Self::StatsPeaks => "stats-peaks",
            Self::DumpParams => "dump-params",
            Self::Replay { .. } => "replay",
        }
    }
}
