//! Command-line grammar.

use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

pub const WORKERS_ENV: &str = "EXPERTLAB_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "expertlab", version, about = "Expert-pruning lab for mixture-of-experts models")]
pub struct Cli {
    /// JSON file of default flag values; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for capture, scoring, audits and searches.
    #[arg(long, global = true, env = WORKERS_ENV, default_value_t = 1,
          value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: u32,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a random model, or the planted model of a fixture.
    GenModel(GenModel),
    /// Sample a token stream from one domain of a fixture.
    GenDomain(GenDomain),
    /// Forward a token stream through a model and record its trace.
    Trace(TraceCmd),
    /// Convert a trace between the binary and JSON-Lines renderings.
    Convert(Convert),
    /// Turn traces into a per-expert score table.
    Score(Score),
    /// Build a pruning plan from score tables.
    Plan(Plan),
    /// Apply a pruning plan to a model.
    Apply(Apply),
    /// Compare the top-m expert sets of score tables.
    Overlap(Overlap),
    /// Perturbation-based expert selection.
    Perturb(Perturb),
    /// Check the routed-sum norm bound on a forward pass.
    Audit(Audit),
    /// Write overlap, scatter and similarity CSVs into a directory.
    Report(Report),
}

#[derive(Debug, Args)]
pub struct GenModel {
    /// Fixture JSON, or `default` for the committed fixture. Its config and
    /// planted experts override the size flags.
    #[arg(long)]
    pub fixture: Option<String>,
    /// Override the fixture's plant strength.
    #[arg(long, requires = "fixture")]
    pub strength: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub experts: usize,
    #[arg(long, default_value_t = 4)]
    pub top_k: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 32)]
    pub inner: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDomain {
    /// Fixture JSON, or `default` for the committed fixture.
    #[arg(long, default_value = "default")]
    pub fixture: String,
    #[arg(long)]
    pub domain: String,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    /// Tokens per sample; defaults to the fixture's.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub tokens: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TraceCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub stream: PathBuf,
    /// Output path; a `.jsonl` extension selects the JSON-Lines rendering.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Convert {
    #[arg(long)]
    pub input: PathBuf,
    /// Output path; a `.jsonl` extension selects the JSON-Lines rendering.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum MethodArg {
    Random,
    Frequency,
    Gating,
    EasyEp,
    Mixed,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").args(["trace", "table", "model"]).multiple(true).required(true)))]
pub struct Score {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Trace files. Several traces are merged, except for `mixed`, where each
    /// is one domain.
    #[arg(long)]
    pub trace: Vec<PathBuf>,
    /// Per-domain score tables to mix (`mixed` only).
    #[arg(long)]
    pub table: Vec<PathBuf>,
    /// Model whose dimensions a `random` table takes.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Method applied to each trace before mixing.
    #[arg(long, value_enum, default_value = "easy_ep")]
    pub base_method: MethodArg,
    /// Ignore the first N tokens of every sample.
    #[arg(long, default_value_t = 0)]
    pub skip_first_tokens: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("size").args(["m", "ratio"]).required(true)))]
pub struct Plan {
    /// Score tables; exactly one unless `--remove-exclusive` is given.
    #[arg(long, required = true)]
    pub table: Vec<PathBuf>,
    /// Experts kept per layer (top-m), or the top-m size used to find
    /// domain-exclusive experts.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub m: Option<u64>,
    /// Fraction of all experts kept, distributed across layers.
    #[arg(long, conflicts_with = "remove_exclusive")]
    pub ratio: Option<f64>,
    /// Remove the experts exclusive to this domain's table.
    #[arg(long, requires = "m")]
    pub remove_exclusive: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Apply {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Overlap {
    /// Two tables give a per-layer report; more give a model-wide matrix.
    #[arg(long, required = true)]
    pub table: Vec<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub m: u64,
    /// Also write the result as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Exhaustive,
    Greedy,
}

#[derive(Debug, Args)]
pub struct Perturb {
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration tokens; each layer is searched on its own inputs.
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub m: u64,
    /// Search one layer only; by default every layer is searched.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Largest number of subsets an exhaustive search may evaluate.
    #[arg(long, default_value_t = expertlab::perturb::DEFAULT_EVALUATION_CAP)]
    pub cap: u64,
    /// Search results as JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a pruning plan (requires searching every layer).
    #[arg(long, conflicts_with = "layer")]
    pub plan_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("tokens").args(["stream", "random_tokens"]).required(true)))]
pub struct Audit {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub stream: Option<PathBuf>,
    /// Audit this many standard-normal tokens instead of a stream.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub random_tokens: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Report {
    #[arg(long)]
    pub trace: PathBuf,
    /// Tables to compare in overlap.csv (two or more).
    #[arg(long)]
    pub table: Vec<PathBuf>,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    pub m: u64,
    /// Sample whose similarity map is written.
    #[arg(long, default_value_t = 0)]
    pub sample: u32,
    #[arg(long)]
    pub out_dir: PathBuf,
}
