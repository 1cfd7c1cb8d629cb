use std::path::PathBuf;

use advmetric::attacks::{AttackMethod, Iterations};
use advmetric::data::Naming;
use advmetric::defense::RetrainInit;
use advmetric::eval::Protocol;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "advmetric",
    version,
    about = "Adversarial metric attacks and defenses for retrieval embeddings"
)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Every command serializes to the `config.json` written next to its
/// outputs; `rerun` reads that file back.
#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic train/probe/gallery dataset.
    Synth(SynthArgs),
    /// Train an embedder on a dataset's training split.
    Train(TrainArgs),
    /// Build an adversarial version of a gallery.
    Attack(AttackArgs),
    /// Metric-preserving retraining on clean plus adversarial training data.
    Defend(DefendArgs),
    /// Score retrieval of probes against a gallery.
    Eval(EvalArgs),
    /// White-box/black-box attack matrix over several checkpoints.
    Bench(BenchArgs),
    /// Re-run a command from a recorded config.json.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamingArg {
    MarketStyle,
    Flat,
}

impl From<NamingArg> for Naming {
    fn from(n: NamingArg) -> Self {
        match n {
            NamingArg::MarketStyle => Naming::MarketStyle,
            NamingArg::Flat => Naming::Flat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossArg {
    Ce,
    Triplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Fgsm,
    #[value(name = "i_fgsm", alias = "i-fgsm")]
    IFgsm,
    #[value(name = "mi_fgsm", alias = "mi-fgsm")]
    MiFgsm,
}

impl From<MethodArg> for AttackMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Fgsm => AttackMethod::Fgsm,
            MethodArg::IFgsm => AttackMethod::IFgsm,
            MethodArg::MiFgsm => AttackMethod::MiFgsm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolArg {
    CrossCamera,
    All,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::CrossCamera => Protocol::CrossCamera,
            ProtocolArg::All => Protocol::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Output directory; receives train/, probe/ and gallery/.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub train_ids: u32,
    #[arg(long, default_value_t = 32)]
    pub test_ids: u32,
    #[arg(long, default_value_t = 4)]
    pub images_per_camera: u32,
    #[arg(long, default_value_t = 2)]
    pub cameras: u32,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 8.0)]
    pub color_sigma: f32,
    #[arg(long, default_value_t = 1)]
    pub shift_max: u32,
    #[arg(long, default_value_t = 4.0)]
    pub noise_sigma: f32,
}

/// Optimizer settings shared by `train` and `defend`.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long = "lr", default_value_t = 0.05)]
    pub learning_rate: f32,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Triplet margin.
    #[arg(long, default_value_t = 0.3)]
    pub margin: f32,
    /// Identities and images per identity in a triplet batch, as `P,K`.
    #[arg(long, value_delimiter = ',', default_values_t = [8, 4])]
    pub pk: Vec<usize>,
    /// Seeds both initialization and batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset root containing train/.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = LossArg::Ce)]
    pub loss: LossArg,
    #[arg(long, value_delimiter = ',', default_values_t = [256, 128])]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, value_enum, default_value_t = NamingArg::MarketStyle)]
    pub naming: NamingArg,
}

/// Attack settings shared by `attack`, `defend` and `bench`.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AttackSettings {
    #[arg(long, value_enum, default_value_t = MethodArg::IFgsm)]
    pub method: MethodArg,
    /// L∞ budget in pixel levels.
    #[arg(long, default_value_t = 5.0)]
    pub eps: f32,
    /// Step size (default: min(1, eps)).
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long, default_value_t = 1.0)]
    pub mu: f32,
    /// Iteration count or `auto`.
    #[arg(long, default_value = "auto")]
    pub iters: Iterations,
    /// `euclidean` or `mahalanobis:<matrix.json>`.
    #[arg(long, default_value = "euclidean")]
    pub metric: String,
    #[arg(long = "attack-seed", default_value_t = 0)]
    pub attack_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AttackArgs {
    /// Dataset root containing probe/ and gallery/.
    #[arg(long, required_unless_present_all = ["probe", "gallery"])]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub probe: Option<PathBuf>,
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    /// Comma-separated checkpoints; several form an ensemble.
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<PathBuf>,
    /// Output directory for images, manifest.jsonl and config.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub attack: AttackSettings,
    /// Pull gallery images towards another identity's probes.
    #[arg(long)]
    pub targeted: bool,
    /// Fixed target identity (default: a random other identity per image).
    #[arg(long, requires = "targeted")]
    pub target_id: Option<u32>,
    #[arg(long, value_enum, default_value_t = NamingArg::MarketStyle)]
    pub naming: NamingArg,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DefendArgs {
    /// Dataset root containing train/.
    #[arg(long)]
    pub data: PathBuf,
    /// Clean checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Defended checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for the adversarial training images.
    #[arg(long)]
    pub adv_out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub attack: AttackSettings,
    #[command(flatten)]
    #[serde(flatten)]
    pub hyper: HyperArgs,
    /// Start retraining from the clean weights or a fresh seeded init.
    #[arg(long, value_enum, default_value_t = InitArg::Clean)]
    #[serde(default)]
    pub init: InitArg,
    #[arg(long, value_enum, default_value_t = NamingArg::MarketStyle)]
    pub naming: NamingArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitArg {
    #[default]
    Clean,
    Fresh,
}

impl From<InitArg> for RetrainInit {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::Clean => RetrainInit::CleanWeights,
            InitArg::Fresh => RetrainInit::Fresh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Dataset root containing probe/ and gallery/.
    #[arg(long, required_unless_present_all = ["probe", "gallery"])]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Gallery directory, e.g. an attack output.
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    /// `euclidean` or `mahalanobis:<matrix.json>`.
    #[arg(long, default_value = "euclidean")]
    pub metric: String,
    #[arg(long, value_enum, default_value_t = ProtocolArg::CrossCamera)]
    pub protocol: ProtocolArg,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10])]
    pub ranks: Vec<usize>,
    /// Report path (JSON); the report is always printed to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Clean-gallery report to compute the mAP ratio against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Write ranking lists of this length for the first probes.
    #[arg(long, requires = "ranking_out")]
    pub ranking: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub ranking_probes: usize,
    /// Directory for ranking JSON and PNG strips.
    #[arg(long)]
    pub ranking_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = NamingArg::MarketStyle)]
    pub naming: NamingArg,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated checkpoints; each attacks, each is evaluated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<PathBuf>,
    /// Result table (JSON).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub attack: AttackSettings,
    /// Evaluation metric (default: same as the attack metric).
    #[arg(long)]
    pub eval_metric: Option<String>,
    #[arg(long, value_enum, default_value_t = ProtocolArg::CrossCamera)]
    pub protocol: ProtocolArg,
    #[arg(long, value_enum, default_value_t = NamingArg::MarketStyle)]
    pub naming: NamingArg,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    /// A config.json written by an earlier run.
    #[arg(long)]
    pub config: PathBuf,
}
