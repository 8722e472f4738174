//! Command-line front end: data generation, training, evaluation, ablation,
//! prediction export and the verification suites.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

use hse_core::hse::{SdiTokens, VariantConfig};
use hse_core::semantics::ProjectorKind;

#[derive(Parser, Debug)]
#[command(
    name = "hse",
    version,
    about = "Few-shot segmentation with class-description embeddings"
)]
struct Cli {
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic shape benchmark.
    GenData(GenDataArgs),
    /// Train a model episodically and write its parameters.
    Train(TrainArgs),
    /// Evaluate trained parameters on held-out test episodes.
    Eval(EvalArgs),
    /// Train and evaluate several variants into one table.
    Ablate(AblateArgs),
    /// Export query, ground truth, prior and prediction of one episode as PNGs.
    Predict(PredictArgs),
    /// Run a verification suite.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 9)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    extent: usize,
    #[arg(long, default_value_t = 60)]
    train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    test_per_class: usize,
    /// Also write synthetic class embeddings (JSON lines) to this file.
    #[arg(long)]
    embeddings_out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    ct: usize,
}

#[derive(Args, Debug, Clone)]
struct EmbeddingArgs {
    /// JSON-lines embedding file ({"name","dim","vector"} per line).
    #[arg(long, conflicts_with = "synth_embeddings")]
    embeddings: Option<PathBuf>,
    /// Synthesize embeddings from class names.
    #[arg(long)]
    synth_embeddings: bool,
    /// Dimension of synthesized embeddings.
    #[arg(long, default_value_t = 16)]
    ct: usize,
    #[arg(long, default_value_t = 7)]
    embedding_seed: u64,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "sd3,gc2")]
    variant: VariantConfig,
    #[arg(long, default_value = "linear")]
    projector: ProjectorKind,
    /// Feature channels of the extractor.
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Embedding tokens appended per row: W (one per column) or 1.
    #[arg(long, default_value = "W")]
    sdi_tokens: SdiTokens,
    #[arg(long, default_value_t = 2)]
    decoder_depth: usize,
    /// Let gradients reach the extractor.
    #[arg(long)]
    train_backbone: bool,
}

#[derive(Args, Debug, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 200)]
    episodes_per_epoch: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Polynomial learning-rate decay with this power (constant when absent).
    #[arg(long)]
    poly_power: Option<f64>,
    /// Seeds parameter initialisation.
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    /// Seeds the training episode stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    embeddings: EmbeddingArgs,
    /// Parameter snapshot to write; its run description goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    loss_curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    params: PathBuf,
    /// Defaults to the training fold.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Average IoU per episode instead of accumulating pixel counts.
    #[arg(long)]
    per_episode_iou: bool,
    /// Override the embeddings recorded at training time.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Semicolon-separated variants such as "off,off;sd3,off"; defaults to
    /// Baseline, +SDI, +GCM and the full model.
    #[arg(long)]
    variants: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    folds: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    /// Seeds the training episode stream.
    #[arg(long, default_value_t = 0)]
    train_stream_seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    embeddings: EmbeddingArgs,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Aligned text table.
    #[arg(long)]
    text: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value_t = 0)]
    episode_seed: u64,
    #[arg(long, default_value_t = 0)]
    episode_index: u64,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    /// `<stem>.png` expands to `<stem>_query.png`, `_truth`, `_prior` and `_pred`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("suite").required(true).multiple(false)))]
struct CheckArgs {
    /// Tape gradients against central finite differences.
    #[arg(long, group = "suite")]
    gradients: bool,
    /// Forward kernels against naive loop references.
    #[arg(long, group = "suite")]
    oracles: bool,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run::dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(run::exit_code(&e))
        }
    }
}
