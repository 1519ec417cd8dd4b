use std::fmt;
use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "rgvae",
    version,
    about = "Relational graph VAEs and DistMult for knowledge graphs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Filtered link prediction on a dataset split.
    EvalLp(EvalArgs),
    /// Sample triples from the prior and validate head types.
    Generate(GenerateArgs),
    /// Decode latent paths between or around triples.
    Interpolate(InterpolateArgs),
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck(GradcheckArgs),
    /// Dump checkpoint parameter values for histograms.
    Params(ParamsArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Graph VAE with an MLP encoder.
    Rgvae,
    /// Graph VAE with a graph-convolutional encoder.
    Crgvae,
    Distmult,
    /// DistMult with Gaussian embeddings.
    Vdistmult,
}

impl ModelKind {
    pub fn is_graph_vae(self) -> bool {
        matches!(self, ModelKind::Rgvae | ModelKind::Crgvae)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Rgvae => "rgvae",
            ModelKind::Crgvae => "crgvae",
            ModelKind::Distmult => "distmult",
            ModelKind::Vdistmult => "vdistmult",
        })
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Valid,
    Test,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossArg {
    Bce,
    Elbo,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TypeMatchArg {
    Base,
    Substring,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpMode {
    /// Straight line between two triples.
    Between,
    /// One latent dimension at a time around an anchor.
    Dims,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory with train.txt, valid.txt and test.txt.
    #[arg(long)]
    pub dataset_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelKind::Rgvae)]
    pub model: ModelKind,
    /// Train on train + valid (evaluation then uses test).
    #[arg(long)]
    pub final_mode: bool,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    /// Defaults to 64 for the graph VAEs and 512 for DistMult.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch TSV log; standard output when absent.
    #[arg(long)]
    pub log: Option<PathBuf>,

    #[arg(long, default_value_t = 2)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub d_z: usize,
    #[arg(long, default_value_t = 512)]
    pub d_h: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub perminv: bool,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub clipgrad: bool,
    #[arg(long, default_value_t = 1.0)]
    pub max_grad_norm: f64,
    #[arg(long, default_value_t = rgvae_core::matching::DEFAULT_ITERATIONS)]
    pub match_iterations: usize,

    #[arg(long, default_value_t = 256)]
    pub d_emb: usize,
    #[arg(long, value_enum, default_value_t = LossArg::Bce)]
    pub loss: LossArg,
    /// Negatives per positive triple.
    #[arg(long, default_value_t = 10)]
    pub negatives: usize,

    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

/// Unset values fall back to the model's defaults.
#[derive(Args, Debug)]
pub struct OptimizerArgs {
    /// 3e-5 for the graph VAEs, 1e-2 for DistMult.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub lookahead_k: Option<u64>,
    #[arg(long)]
    pub lookahead_alpha: Option<f64>,
    #[arg(long, action = ArgAction::Set)]
    pub grad_centralization: Option<bool>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the directory recorded in the checkpoint.
    #[arg(long)]
    pub dataset_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Evaluate a seeded subset of this size fraction.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rank against all entities instead of filtering known triples.
    #[arg(long)]
    pub raw: bool,
    #[arg(long, default_value_t = 1024)]
    pub chunk: usize,
    /// Report path; standard output when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Optional per-triple rank table.
    #[arg(long)]
    pub ranks: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset_dir: Option<PathBuf>,
    /// Entity type file: `entity<TAB>type` per line.
    #[arg(long)]
    pub types: PathBuf,
    /// Kept triples to collect.
    #[arg(long, default_value_t = 100_000)]
    pub count: usize,
    /// Variance of the latent prior.
    #[arg(long, default_value_t = 1.0)]
    pub variance: f64,
    /// Type keyword for the relation filter and the head check.
    #[arg(long, default_value = "people")]
    pub key: String,
    #[arg(long, value_enum, default_value_t = TypeMatchArg::Base)]
    pub type_match: TypeMatchArg,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Optional table of the kept triples.
    #[arg(long)]
    pub triples: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = InterpMode::Between)]
    pub mode: InterpMode,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Index of the first triple in the evaluation split; drawn from the
    /// seed when absent.
    #[arg(long)]
    pub from: Option<usize>,
    /// Index of the second triple (between mode).
    #[arg(long)]
    pub to: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
