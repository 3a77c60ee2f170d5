use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// Instance-based dependency parser.
#[derive(Parser, Debug)]
#[command(name = "edgekit", version, about)]
pub struct Cli {
    /// Worker threads (0 = all cores). `--threads 1` makes every output
    /// bit-reproducible.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an edge (head selection) or label model.
    ///
    /// Configuration is resolved as: defaults < --config file (JSON or
    /// TOML) < EDGEKIT_* environment variables < --set key=value. Nested
    /// keys use dots on the command line (encoder.lstm_hidden=200) and
    /// double underscores in the environment (EDGEKIT_ENCODER__LSTM_HIDDEN).
    Train(TrainArgs),
    /// Build the support summary (fast mode) and explain index
    /// (explainable mode) of a checkpoint over its training treebank.
    Precompute(PrecomputeArgs),
    /// Parse CoNLL-U input.
    Parse(ParseArgs),
    /// Write the nearest training edges behind every predicted edge as
    /// JSON lines.
    Explain(ExplainArgs),
    /// UAS/LAS of predictions (or of checkpoints parsing the gold file).
    Eval(EvalArgs),
    /// Identical subclass test of head-selection checkpoints.
    Subclass(SubclassArgs),
    /// k-occurrence (hubness) counts of support edges.
    Hubness(HubnessArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training treebank (CoNLL-U).
    #[arg(long)]
    pub train: PathBuf,
    /// Development treebank used for checkpoint selection.
    #[arg(long)]
    pub dev: PathBuf,
    /// Output directory for model.ckpt and train.log.jsonl.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON or TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// key=value override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pretrained word vectors (word2vec text format).
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub show_config: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArtifactKind {
    Summary,
    Index,
    Both,
}

#[derive(Args, Debug)]
pub struct PrecomputeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training treebank the checkpoint was trained on.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long, value_enum, default_value_t = ArtifactKind::Both)]
    pub kind: ArtifactKind,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Fast,
    Explainable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecoderArg {
    Greedy,
    Cle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScoringArg {
    Weight,
    Instance,
}

/// Model and inference options shared by parse, explain and eval.
#[derive(Args, Debug, Clone)]
pub struct InferArgs {
    /// Edge (head selection) checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Label checkpoint; without it DEPREL is written as `_`.
    #[arg(long)]
    pub label_checkpoint: Option<PathBuf>,
    /// Artifacts are looked up next to each checkpoint
    /// (<stem>.summary, <stem>.index) unless given here.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Fast)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = DecoderArg::Greedy)]
    pub decoder: DecoderArg,
    /// Require exactly one ROOT dependent (CLE only).
    #[arg(long)]
    pub single_root: bool,
    /// Inference scoring; defaults to the checkpoint's learning scoring.
    #[arg(long, value_enum)]
    pub scoring: Option<ScoringArg>,
}

#[derive(Args, Debug)]
pub struct ParseArgs {
    #[command(flatten)]
    pub infer: InferArgs,
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub infer: InferArgs,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// JSONL output; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Thresholds {
    /// Exit 1 unless the (mean) UAS reaches this value.
    #[arg(long)]
    pub min_uas: Option<f64>,
    /// Exit 1 unless the (mean) LAS reaches this value.
    #[arg(long)]
    pub min_las: Option<f64>,
    /// Write summary.json (and TSV curves) here.
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
    /// Skip punctuation tokens (deprel `punct` or punctuation-only form).
    #[arg(long)]
    pub exclude_punct: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub gold: PathBuf,
    /// Predicted CoNLL-U files; scores are averaged.
    #[arg(long, num_args = 1..)]
    pub pred: Vec<PathBuf>,
    /// Edge checkpoints to parse the gold file with (one run per seed);
    /// scores are averaged.
    #[arg(long, num_args = 1.., conflicts_with = "pred")]
    pub checkpoint: Vec<PathBuf>,
    /// Label checkpoints paired with --checkpoint.
    #[arg(long, num_args = 1..)]
    pub label_checkpoint: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Fast)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = DecoderArg::Greedy)]
    pub decoder: DecoderArg,
    #[arg(long)]
    pub single_root: bool,
    #[arg(long, value_enum)]
    pub scoring: Option<ScoringArg>,
    #[command(flatten)]
    pub thresholds: Thresholds,
}

#[derive(Args, Debug)]
pub struct SubclassArgs {
    /// Edge-task checkpoints (one per seed); scores are averaged.
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Training treebank; builds the index in memory instead of loading
    /// <stem>.index.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long, value_enum, default_value_t = DecoderArg::Greedy)]
    pub decoder: DecoderArg,
    #[command(flatten)]
    pub thresholds: Thresholds,
}

#[derive(Args, Debug)]
pub struct HubnessArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training treebank; builds the index in memory instead of loading
    /// <stem>.index.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Treebank whose gold edges are the queries.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Length of the ranked hub list.
    #[arg(long, default_value_t = 100)]
    pub top: usize,
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
    /// Report name; defaults to the checkpoint stem.
    #[arg(long)]
    pub name: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error[config]: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let kind = e.downcast_ref::<edgekit::Error>().map_or_else(
                || if e.downcast_ref::<std::io::Error>().is_some() { "io" } else { "error" },
                |k| k.kind(),
            );
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(2)
        }
    }
}
