use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use shapcam::eval::{Metric, DEFAULT_KEEP_FRACTION};
use shapcam::shapley::DEFAULT_SAMPLES;
use shapcam::{BaselineMode, Method};

#[derive(Debug, Parser)]
#[command(name = "shapcam", version, about = "Shapley-value saliency maps for CNN classifiers")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute one saliency map and write it with an overlay and a manifest.
    Explain(ExplainArgs),
    /// Run the faithfulness and localization metrics over an annotation file.
    Evaluate(EvaluateArgs),
    /// `evaluate` over every method, with mean curves and a summary table.
    Compare(EvaluateArgs),
    /// Dump the coalition game of one feature map.
    GameDebug(GameDebugArgs),
    /// Serve the oracle protocol on stdin/stdout with an in-process model.
    Adapter(AdapterArgs),
    /// Write a planted-patch dataset (PPM images and annotations).
    Synth(SynthArgs),
    /// Write the bundled toy model files.
    WriteToynet(WriteToynetArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preprocess {
    /// Bilinear resize to the model input, no normalization.
    Resize,
    /// Resize to 224×224 and normalize with the ImageNet statistics.
    Imagenet,
    /// Use the decoded image as is.
    None,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Model definition (TOML).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Weight file matching --model.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Adapter command scoring feature maps (Shap-CAM worth oracle).
    #[arg(long)]
    pub oracle_cmd: Option<String>,
    /// Adapter command scoring whole input images (metrics, RISE, Score-CAM).
    #[arg(long)]
    pub input_oracle_cmd: Option<String>,
    #[arg(long, value_enum, default_value_t = Preprocess::Resize)]
    pub preprocess: Preprocess,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SamplingArgs {
    /// Permutations per image.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    /// Master seed; drawn and recorded when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = BaselineMode::PerChannel)]
    pub baseline: BaselineMode,
    /// Enumerate all coalitions (at most 16 players).
    #[arg(long)]
    pub exact: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "SHAPCAM_WORKERS", default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RiseArgs {
    #[arg(long, default_value_t = 4000)]
    pub rise_masks: usize,
    #[arg(long, default_value_t = 7)]
    pub rise_grid: usize,
    #[arg(long, default_value_t = 0.5)]
    pub rise_keep_prob: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input image (PPM or PNG).
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Precomputed feature map (JSON), required with --oracle-cmd.
    #[arg(long)]
    pub feature_map: Option<PathBuf>,
    /// Target class; the top-1 prediction when absent.
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, default_value_t = Method::ShapCam)]
    pub method: Method,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[command(flatten)]
    pub rise: RiseArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSON-lines annotations: {"image", "class", "bbox"?, "feature_map"?}.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = Metric::ALL)]
    pub metrics: Vec<Metric>,
    /// Methods to evaluate; `compare` defaults to all of them.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<Method>,
    #[arg(long, default_value_t = DEFAULT_KEEP_FRACTION)]
    pub keep_fraction: f64,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[command(flatten)]
    pub rise: RiseArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GameDebugArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub feature_map: Option<PathBuf>,
    #[arg(long)]
    pub class: Option<usize>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Write the dump here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    /// Score feature maps with the layers after the last conv block.
    Head,
    /// Score whole input images.
    Input,
}

#[derive(Debug, Clone, Args)]
pub struct AdapterArgs {
    /// Model definition; the bundled toy model when absent.
    #[arg(long, requires = "weights")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Head)]
    pub split: Split,
    /// Answer with errors after this many score requests (testing aid).
    #[arg(long, hide = true)]
    pub fail_after: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub count: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write each image's toy-model feature map for oracle runs.
    #[arg(long)]
    pub feature_maps: bool,
}

#[derive(Debug, Clone, Args)]
pub struct WriteToynetArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// manifest.json of an earlier run.
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}
