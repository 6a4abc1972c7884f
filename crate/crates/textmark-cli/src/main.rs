//! `textmark`: watermark text datasets with backdoor triggers and verify,
//! via black-box queries and a t-test on the attack success rate, whether a
//! classifier was trained on them.

mod commands;
mod stub;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use textmark::model::ModelError;

#[derive(Parser)]
#[command(name = "textmark", version, about, max_term_width = 100)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Master seed; every randomized stage derives from it. Falls back to
    /// the TEXTMARK_SEED environment variable, then the config file, then 0.
    #[arg(long, global = true, env = "TEXTMARK_SEED")]
    seed: Option<u64>,

    /// JSON file with default settings: {"seed": <int>, "jobs": <int>}.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for sweep cells and shadow-model training.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

/// Defaults loadable from --config.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    seed: Option<u64>,
    jobs: Option<usize>,
}

/// Fully resolved global settings, embedded in every report.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Globals {
    pub seed: u64,
    pub jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a linearly separable synthetic labeled corpus as JSONL.
    Synth(SynthArgs),
    /// Poison a dataset with one user's trigger and emit marked JSONL plus
    /// a recipe file for later verification.
    Mark(MarkArgs),
    /// Train the reference classifier on a (marked) JSONL dataset.
    Train(TrainArgs),
    /// Verify whether a model is backdoored with this recipe's trigger.
    Verify(VerifyArgs),
    /// Print the minimal ASR that rejects the clean-model hypothesis.
    Threshold(ThresholdArgs),
    /// Run the full multi-user experiment: mark, train, verify every user.
    Simulate(SimulateArgs),
    /// Sweep one factor and emit a CSV of (setting, ASR, accuracy, decision).
    Sweep(SweepArgs),
    /// Score the watermark verifier or an MI baseline on the benchmark.
    Baseline(BaselineArgs),
    /// Toy external model speaking the JSON-lines adapter protocol.
    StubModel(stub::StubArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelArg {
    Character,
    Word,
    Sentence,
}

impl From<LevelArg> for textmark::TriggerLevel {
    fn from(value: LevelArg) -> Self {
        match value {
            LevelArg::Character => textmark::TriggerLevel::Character,
            LevelArg::Word => textmark::TriggerLevel::Word,
            LevelArg::Sentence => textmark::TriggerLevel::Sentence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationArg {
    Initial,
    Middle,
    End,
    Random,
}

impl From<LocationArg> for textmark::TriggerLocation {
    fn from(value: LocationArg) -> Self {
        match value {
            LocationArg::Initial => textmark::TriggerLocation::Initial,
            LocationArg::Middle => textmark::TriggerLocation::Middle,
            LocationArg::End => textmark::TriggerLocation::End,
            LocationArg::Random => textmark::TriggerLocation::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Insert,
    Replace,
}

impl From<ModeArg> for textmark::TriggerMode {
    fn from(value: ModeArg) -> Self {
        match value {
            ModeArg::Insert => textmark::TriggerMode::Insert,
            ModeArg::Replace => textmark::TriggerMode::Replace,
        }
    }
}

/// Corpus-shape flags shared by every command that generates data.
#[derive(Debug, Args, Serialize, Clone, Copy)]
pub struct CorpusArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Background vocabulary size.
    #[arg(long, default_value_t = 60)]
    pub vocab: usize,
    /// Signature keywords per class.
    #[arg(long, default_value_t = 2)]
    pub keywords_per_class: usize,
    /// Chance of extra class keywords per token position.
    #[arg(long, default_value_t = 0.0)]
    pub keyword_rate: f64,
    /// Fraction of training labels flipped at random.
    #[arg(long, default_value_t = 0.05)]
    pub label_noise: f64,
    #[arg(long, default_value_t = 8)]
    pub tokens_min: usize,
    #[arg(long, default_value_t = 20)]
    pub tokens_max: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Output JSONL path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub corpus: CorpusArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct MarkArgs {
    /// Input dataset (JSONL with text and label fields).
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,
    /// Marked dataset output path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Recipe JSON output path, consumed later by `verify`.
    #[arg(long, value_name = "FILE")]
    pub recipe_out: PathBuf,
    /// Trigger dictionary JSON; the built-in dictionary when omitted.
    #[arg(long, value_name = "FILE")]
    pub dictionary: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LevelArg::Word)]
    pub level: LevelArg,
    /// Pin a trigger pattern instead of drawing one from the dictionary.
    #[arg(long)]
    pub pattern: Option<String>,
    #[arg(long, value_enum, default_value_t = LocationArg::Initial)]
    pub location: LocationArg,
    /// Times the trigger is repeatedly applied.
    #[arg(long, default_value_t = 1)]
    pub size: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Insert)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    pub target_label: usize,
    /// Number of samples to mark. Exactly one of --count / --rate.
    #[arg(long)]
    pub count: Option<usize>,
    /// Fraction of the dataset to mark. Exactly one of --count / --rate.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long, default_value = "u0")]
    pub user_id: String,
    /// Class count override; inferred from the data when omitted.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    /// Hash bucket count (power of two).
    #[arg(long, default_value_t = 1 << 18)]
    pub n_features: usize,
    /// Add character 3..5-grams to the feature space.
    #[arg(long, default_value_t = false)]
    pub char_ngrams: bool,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub l2: f64,
}

impl ModelArgs {
    pub fn to_config(&self, rng_seed: u64) -> textmark::RefModelConfig {
        textmark::RefModelConfig {
            n_features: self.n_features,
            char_ngrams: self.char_ngrams,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            l2: self.l2,
            rng_seed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Training data (JSONL, possibly marked).
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Serialized model output path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Held-out JSONL for the clean-accuracy report.
    #[arg(long, value_name = "FILE")]
    pub test: Option<PathBuf>,
    /// Class count override.
    #[arg(long)]
    pub k: Option<usize>,
    /// Report JSON output path; the report always goes to stdout too.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    /// Serialized reference model to query.
    #[arg(long, value_name = "FILE", conflicts_with = "external")]
    pub model: Option<PathBuf>,
    /// Command line of an external model speaking the JSON-lines protocol.
    #[arg(long, value_name = "CMD")]
    pub external: Option<String>,
    /// Held-out JSONL the probes are built from.
    #[arg(long, value_name = "FILE")]
    pub test: PathBuf,
    /// Recipe JSON produced by `mark`.
    #[arg(long, value_name = "FILE")]
    pub recipe: PathBuf,
    /// Probe query count.
    #[arg(long, default_value_t = 30)]
    pub m: usize,
    /// Significance parameter of the test.
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    /// Class count override; the recipe's value when omitted.
    #[arg(long)]
    pub k: Option<usize>,
    /// Per-query timeout for external models, in seconds.
    #[arg(long, default_value_t = 30)]
    pub timeout_secs: u64,
    /// Report JSON output path; the report always goes to stdout too.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ThresholdArgs {
    #[arg(long, default_value_t = 30)]
    pub m: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 10)]
    pub users: usize,
    /// The first N users are members whose marked data enters training.
    #[arg(long, default_value_t = 5)]
    pub members: usize,
    /// Members sharing target label 0, counted from user 0.
    #[arg(long, default_value_t = 0)]
    pub collab: usize,
    #[arg(long, default_value_t = 5)]
    pub samples_per_user: usize,
    #[arg(long, default_value_t = 20)]
    pub marks_per_member: usize,
    #[arg(long, default_value_t = 2000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 600)]
    pub test_size: usize,
    #[arg(long, default_value_t = 30)]
    pub m: usize,
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Pattern,
    Location,
    Rate,
    Size,
    Collab,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated grid; a per-axis default grid when omitted.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<String>>,
    /// CSV output path; stdout when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LevelArg::Word)]
    pub level: LevelArg,
    #[arg(long, value_enum, default_value_t = LocationArg::Initial)]
    pub location: LocationArg,
    #[arg(long, default_value_t = 0.01)]
    pub rate: f64,
    #[arg(long, default_value_t = 1)]
    pub size: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Insert)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    pub target_label: usize,
    #[arg(long, default_value_t = 2000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 600)]
    pub test_size: usize,
    /// Probe count per cell.
    #[arg(long, default_value_t = 100)]
    pub m: usize,
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    /// Member count for the collab axis.
    #[arg(long, default_value_t = 5)]
    pub members: usize,
    #[arg(long, default_value_t = 20)]
    pub marks_per_member: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Shadow,
    Metric,
    Textmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationArg {
    /// Threshold tuned on the target's own train/test losses.
    Oracle,
    /// Threshold tuned on a shadow model over disjoint proxy data.
    Proxy,
}

#[derive(Debug, Args, Serialize)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 100)]
    pub users: usize,
    #[arg(long, default_value_t = 50)]
    pub members: usize,
    #[arg(long, default_value_t = 0)]
    pub collab: usize,
    #[arg(long, default_value_t = 5)]
    pub samples_per_user: usize,
    #[arg(long, default_value_t = 20)]
    pub marks_per_member: usize,
    #[arg(long, default_value_t = 3000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 800)]
    pub test_size: usize,
    #[arg(long, default_value_t = 2000)]
    pub proxy_size: usize,
    #[arg(long, default_value_t = 4)]
    pub n_shadow: usize,
    #[arg(long, value_enum, default_value_t = CalibrationArg::Oracle)]
    pub calibration: CalibrationArg,
    #[arg(long, default_value_t = 30)]
    pub m: usize,
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

/// Failures are classified for the exit-code contract: 2 usage, 3 data,
/// 4 external-model protocol.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    External(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::External(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::External(_) => 4,
        }
    }
}

impl From<textmark::marking::DataError> for CliError {
    fn from(e: textmark::marking::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<textmark::trigger::TriggerError> for CliError {
    fn from(e: textmark::trigger::TriggerError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Spawn(_) | ModelError::Protocol(_) | ModelError::Timeout(_) => {
                CliError::External(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<textmark::verify::VerifyError> for CliError {
    fn from(e: textmark::verify::VerifyError) -> Self {
        match e {
            textmark::verify::VerifyError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<textmark::baselines::MiError> for CliError {
    fn from(e: textmark::baselines::MiError) -> Self {
        match e {
            textmark::baselines::MiError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<textmark::benchmark::BenchmarkError> for CliError {
    fn from(e: textmark::benchmark::BenchmarkError) -> Self {
        match e {
            textmark::benchmark::BenchmarkError::Model(m) => m.into(),
            textmark::benchmark::BenchmarkError::Verify(v) => v.into(),
            textmark::benchmark::BenchmarkError::Mi(m) => m.into(),
            textmark::benchmark::BenchmarkError::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn resolve_globals(args: &GlobalArgs) -> Result<Globals, CliError> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {path:?}: {e}")))?;
            serde_json::from_str(&raw)
                .map_err(|e| CliError::Usage(format!("bad config {path:?}: {e}")))?
        }
        None => FileConfig::default(),
    };
    Ok(Globals {
        seed: args.seed.or(file.seed).unwrap_or(0),
        jobs: args.jobs.or(file.jobs).unwrap_or(1).max(1),
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let globals = resolve_globals(&cli.global)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(globals.jobs)
        .build_global()
        .ok();

    match cli.command {
        Command::Synth(args) => commands::synth(&args, globals),
        Command::Mark(args) => commands::mark(&args, globals),
        Command::Train(args) => commands::train(&args, globals),
        Command::Verify(args) => commands::verify(&args, globals),
        Command::Threshold(args) => commands::threshold(&args),
        Command::Simulate(args) => commands::simulate(&args, globals),
        Command::Sweep(args) => commands::sweep(&args, globals),
        Command::Baseline(args) => commands::baseline(&args, globals),
        Command::StubModel(args) => stub::run(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
