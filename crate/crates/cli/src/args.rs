use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tod_core::{ActionRateVariant, MultiWozVersion};

#[derive(Debug, Parser)]
#[command(
    name = "tod",
    version,
    about = "Train, evaluate and serve task-oriented dialogue models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a MultiWOZ distribution into a corpus cache.
    PrepareData(PrepareArgs),
    /// Supervised pre-training of every module.
    TrainSl(TrainSlArgs),
    /// Offline policy-gradient fine-tuning of the action policy.
    TrainRl(TrainRlArgs),
    /// Inform, success and BLEU over a split.
    Evaluate(EvaluateArgs),
    /// Terminal conversation with a checkpoint.
    Chat(ChatArgs),
    /// HTTP session service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncoderChoice {
    Tiny,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn enabled(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Directory holding data.json, the split lists and the *_db.json files.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "2.1")]
    pub version: MultiWozVersion,
    /// Ontology TOML; the bundled ontology when omitted.
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    #[arg(long, short, default_value = "corpus.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorpusArg {
    /// Corpus cache written by prepare-data.
    #[arg(long, env = "TOD_CORPUS", default_value = "corpus.json")]
    pub corpus: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainSlArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long, short, default_value = "model.ckpt")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = EncoderChoice::Tiny)]
    pub encoder: EncoderChoice,
    #[arg(long, default_value_t = 3e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 10.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 40)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub min_epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Append one JSON record per epoch to this file.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    /// Rule-based action control at inference.
    #[arg(long, value_enum, env = "TOD_CONTROL", default_value_t = Switch::On)]
    pub control: Switch,
    /// Also trigger the rules on recommend and select.
    #[arg(long)]
    pub widen_control: bool,
    /// Control rules TOML; the built-in rules when omitted.
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainRlArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    /// Pre-trained checkpoint to fine-tune.
    #[arg(long, env = "TOD_MODEL")]
    pub model: PathBuf,
    #[arg(long, short, default_value = "model-rl.ckpt")]
    pub out: PathBuf,
    /// Action-reward weight; 1e-3 for MultiWOZ 2.0 and 1e-2 for 2.1 when omitted.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value_t = 0.99)]
    pub gamma: f64,
    #[arg(long, default_value_t = ActionRateVariant::Weighted)]
    pub variant: ActionRateVariant,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Episodes per policy update.
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Condition the policy on annotated states instead of tracker output.
    #[arg(long)]
    pub gold_states: bool,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long, env = "TOD_MODEL")]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    /// Only the first N dialogues of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub control: ControlArgs,
    /// Label stored in the report metadata.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Write the full report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long, env = "TOD_MODEL")]
    pub model: PathBuf,
    #[command(flatten)]
    pub control: ControlArgs,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long, env = "TOD_MODEL")]
    pub model: PathBuf,
    #[command(flatten)]
    pub control: ControlArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "TOD_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Seed of the first session; later sessions count up from it.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}
