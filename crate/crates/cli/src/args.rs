use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "edgeroute", version, about = "Build, evaluate and serve edge/cloud routers for vision-language model pairs")]
pub struct Cli {
    /// Worker threads for data-parallel steps (0 = one per core)
    #[arg(long, global = true, env = "ECVL_THREADS", default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a response dataset and print summary statistics
    Ingest(IngestArgs),
    /// Derive edge-competency labels for every query
    Label(LabelArgs),
    /// Stratified train/valid/test split
    Split(SplitArgs),
    /// Train a router and pick its threshold on the validation split
    Train(TrainArgs),
    /// Re-run the threshold search for a saved router
    Calibrate(CalibrateArgs),
    /// Route a split with one or more policies and write metrics
    Evaluate(EvaluateArgs),
    /// Failure rate and routing metrics across MES values
    SweepMes(SweepArgs),
    /// Train one router per modality mask and compare with baselines
    Ablate(AblateArgs),
    /// Generate a synthetic dataset with embedding files
    Synth(SynthArgs),
    /// Run the HTTP routing gateway
    Serve(ServeArgs),
    /// Render evaluation files as a CSV or JSON table
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Input {
    /// Response dataset (JSONL)
    #[arg(value_name = "RSD", required_unless_present = "in_path")]
    pub rsd: Option<PathBuf>,
    /// Response dataset, as a flag
    #[arg(long = "in", value_name = "RSD", conflicts_with = "rsd")]
    pub in_path: Option<PathBuf>,
}

impl Input {
    pub fn path(&self) -> &PathBuf {
        self.rsd.as_ref().or(self.in_path.as_ref()).expect("clap enforces one input")
    }
}

#[derive(Debug, Args)]
pub struct Models {
    /// Model name of the edge side
    #[arg(long, default_value = "edge-sim")]
    pub edge: String,
    /// Model name of the cloud side
    #[arg(long, default_value = "cloud-sim")]
    pub cloud: String,
}

#[derive(Debug, Args)]
pub struct Embeddings {
    /// Text embedding file [default: none]
    #[arg(long, value_name = "PATH")]
    pub text_emb: Option<PathBuf>,
    /// Image embedding file [default: none]
    #[arg(long, value_name = "PATH")]
    pub image_emb: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Scenario preset: rcs1, rcs2 or rcs3
    #[arg(long, default_value = "rcs1")]
    pub scenario: String,
    /// Custom ALPHA,BETA,GAMMA replacing the preset weights [default: none]
    #[arg(long, value_name = "A,B,G")]
    pub weights: Option<String>,
    /// Minimal expectation score
    #[arg(long, default_value_t = 6.0)]
    pub mes: f64,
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    /// Router variant
    #[arg(long, default_value = "transformer", value_parser = ["transformer", "mlp", "mf"])]
    pub variant: String,
    /// Shared projection width
    #[arg(long, default_value_t = 256)]
    pub model_dim: usize,
    /// Transformer encoder layers
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Attention heads
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Transformer feed-forward width
    #[arg(long, default_value_t = 512)]
    pub ffn_dim: usize,
    /// Transformer dropout rate
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
    /// MLP hidden widths
    #[arg(long, default_value = "256,256,256")]
    pub hidden: String,
    /// Bilinear factorization rank
    #[arg(long, default_value_t = 16)]
    pub rank: usize,
}

#[derive(Debug, Args)]
pub struct Optimizer {
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Peak learning rate of the one-cycle schedule
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Seed for initialization, shuffling and dropout
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Global gradient-norm clip [default: none]
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub input: Input,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[command(flatten)]
    pub input: Input,
    #[command(flatten)]
    pub models: Models,
    /// proposed:mes=N, win-hard or win-soft:k=N
    #[arg(long, default_value = "proposed:mes=6")]
    pub strategy: String,
    #[arg(long, default_value = "labels.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub input: Input,
    #[command(flatten)]
    pub models: Models,
    #[arg(long, default_value = "labels.jsonl")]
    pub labels: PathBuf,
    /// TRAIN:VALID:TEST proportions
    #[arg(long, default_value = "60:20:20")]
    pub ratios: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "split.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: Input,
    #[command(flatten)]
    pub models: Models,
    #[arg(long, default_value = "labels.jsonl")]
    pub labels: PathBuf,
    #[arg(long, default_value = "split.jsonl")]
    pub split: PathBuf,
    #[command(flatten)]
    pub embeddings: Embeddings,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub optimizer: Optimizer,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Modality mask as text/image/stats bits, e.g. ttt or fft
    #[arg(long, default_value = "ttt")]
    pub mask: String,
    #[arg(long, default_value = "router.bin")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub input: Input,
    #[command(flatten)]
    pub models: Models,
    #[arg(long, default_value = "split.jsonl")]
    pub split: PathBuf,
    /// Split used for the threshold search
    #[arg(long, default_value = "valid")]
    pub on: String,
    #[command(flatten)]
    pub embeddings: Embeddings,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value = "router.bin")]
    pub model: PathBuf,
    /// Output model [default: overwrite --model]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub input: Input,
    #[command(flatten)]
    pub models: Models,
    #[arg(long, default_value = "split.jsonl")]
    pub split: PathBuf,
    /// Split to evaluate on
    #[arg(long, default_value = "test")]
    pub on: String,
    /// Labels for the ACC column [default: none]
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[command(flatten)]
    pub embeddings: Embeddings,
    #[arg(long, default_value = "router.bin")]
    pub model: PathBuf,
    /// router, all-large, all-small or random:p=P; repeat or comma-separate
    #[arg(long, value_delimiter = ',', default_value = "router")]
    pub policy: Vec<String>,
    /// Seed of the random policy
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Minimal expectation score for APSP and RCS
    #[arg(long, default_value_t = 6.0)]
    pub mes: f64,
    #[arg(long, default_value = "eval.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: Input,
    #[command(flatten)]
    pub models: Models,
    #[arg(long, default_value_t = 1.0)]
    pub from: f64,
    #[arg(long, default_value_t = 9.0)]
    pub to: f64,
    #[arg(long, default_value_t = 1.0)]
    pub step: f64,
    /// Weight preset for the per-MES threshold search
    #[arg(long, default_value = "rcs1")]
    pub scenario: String,
    /// Router whose threshold is re-searched per MES [default: none, route by the labels]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Split file; the threshold is searched on valid and applied to test [default: none, use every record]
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[command(flatten)]
    pub embeddings: Embeddings,
    /// Output CSV [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub input: Input,
    #[command(flatten)]
    pub models: Models,
    #[arg(long, default_value = "labels.jsonl")]
    pub labels: PathBuf,
    #[arg(long, default_value = "split.jsonl")]
    pub split: PathBuf,
    #[command(flatten)]
    pub embeddings: Embeddings,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub optimizer: Optimizer,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Comma-separated modality masks
    #[arg(long, default_value = "ttt,tff,ftf,fft")]
    pub masks: String,
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    pub format: String,
    #[arg(long, default_value = "ablation.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generation spec; overrides --n, --margin and --seed [default: none]
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Records to generate
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Separation margin of the planted signal
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for rsd.jsonl, text.emb and image.emb
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Gateway config file (flat TOML)
    #[arg(long, env = "ECVL_CONFIG", default_value = "gateway.toml")]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation files written by `evaluate`
    #[arg(value_name = "EVAL", required_unless_present = "in_paths")]
    pub inputs: Vec<PathBuf>,
    /// Evaluation files, as a flag
    #[arg(long = "in", value_name = "EVAL")]
    pub in_paths: Vec<PathBuf>,
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    pub format: String,
    /// Output file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}
