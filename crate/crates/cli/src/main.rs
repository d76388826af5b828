//! `cicbench` command-line interface.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cicbench::corpus::{TaskKind, Tokenizer};
use cicbench::builder::SftStyle;
use cicbench::metrics::RougeVariant;
use cicbench::rap::{ProbeTask, ProbedStyle, Regime};
use cicbench::sim::Distribution;
use cicbench::ErrorKind;

/// Build confounder-rich in-context retrieval benchmarks, probe attention
/// heads, filter contexts and score predictions.
#[derive(Parser)]
#[command(name = "cicbench", version)]
struct Cli {
    /// Flat `key = value` file; keys are long flag names. Flags win over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build benchmark instances from a corpus, queries and rankings.
    Build(BuildArgs),
    /// Compute per-head hit rates from attention traces.
    Probe(ProbeArgs),
    /// Keep the passages the top retrieval heads attend to most.
    Filter(FilterArgs),
    /// Render a dataset as prompt/target pairs for fine-tuning.
    SftFormat(SftArgs),
    /// Score predictions.
    Eval(EvalArgs),
    /// Compare the Gumbel-TopK gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the retrieval-head scorer on embedding batches.
    TrainRethead(TrainArgs),
    /// Generate synthetic attention traces (or embedding batches).
    Simulate(SimulateArgs),
    /// Per-task context statistics of a built dataset.
    Stats(StatsArgs),
}

#[derive(Args)]
pub struct BuildArgs {
    /// Corpus JSONL: `id`, `title`, `text` per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Query JSONL: `query_id`, `q`, `a`, `gold_ids`, `task_kind`.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// External ranking JSONL files (repeatable).
    #[arg(long)]
    pub rankings: Vec<PathBuf>,
    /// Treat corpus records as whole documents and chunk them.
    #[arg(long)]
    pub documents: bool,
    #[arg(long)]
    pub chunk_tokens: Option<usize>,
    #[arg(long)]
    pub chunk_overlap: Option<usize>,
    /// Fraction of confounders taken from retrievers; 0 gives random filler.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Prompt token budget.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Depth of the built-in BM25 retriever.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    /// Skip the built-in BM25 retriever.
    #[arg(long)]
    pub no_bm25: bool,
    /// Query BM25 with the question only, without the answer.
    #[arg(long)]
    pub question_only: bool,
    /// Reject queries of any other task kind.
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub tokenizer: Option<Tokenizer>,
    #[arg(long, required = true)]
    pub seed: u64,
    /// Dataset JSONL output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stats JSON output; defaults to `<out>.stats.json`.
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PresetArgs {
    /// Fine-tuning style of the probed model, for the (Q, M) preset.
    #[arg(long)]
    pub style: Option<ProbedStyle>,
    /// Benchmark regime, for the (Q, M) preset.
    #[arg(long)]
    pub regime: Option<Regime>,
    /// Task, for the (Q, M) preset: nq, hotpotqa, fever or wow.
    #[arg(long)]
    pub task: Option<ProbeTask>,
}

#[derive(Args)]
pub struct ProbeArgs {
    /// Trace JSONL: `query_id`, `passage_ids`, `scores` (H x |C|).
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Any JSONL with `query_id` and `gold_ids` (queries or a dataset).
    #[arg(long)]
    pub golds: Option<PathBuf>,
    /// Passages counted per head.
    #[arg(long = "M", alias = "m")]
    pub m: Option<usize>,
    #[command(flatten)]
    pub preset: PresetArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Profiles JSON written by `probe`.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    /// Number of retrieval heads.
    #[arg(long = "Q", alias = "q")]
    pub q: Option<usize>,
    /// Passages kept per head.
    #[arg(long = "M", alias = "m")]
    pub m: Option<usize>,
    #[command(flatten)]
    pub preset: PresetArgs,
    /// Dataset to filter; without it only passage ids are written.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SftArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// DA, RTA or CCI.
    #[arg(long)]
    pub style: Option<SftStyle>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// JSONL records: `query_id`, `prediction`, `references`, optional
    /// `retrieved_ids` and `gold_ids`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// rouge-l, rouge-1 or rouge-2 (dialogue only).
    #[arg(long)]
    pub rouge: Option<RougeVariant>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Largest acceptable relative error.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, required = true)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSONL of `h_q`, `h_c`, `gold`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out JSONL for selection accuracy; defaults to the training data.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Encoder width.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Hard mask forward, relaxed gradient backward.
    #[arg(long)]
    pub straight_through: bool,
    #[arg(long, required = true)]
    pub seed: u64,
    /// Parameters and loss curve JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Dataset whose instances get traces.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Comma-separated designated head ids.
    #[arg(long)]
    pub retrieval_heads: Option<commands::HeadList>,
    /// Mass a retrieval head puts on gold passages.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// dirichlet_like or one_hot.
    #[arg(long)]
    pub distribution: Option<Distribution>,
    /// Emit separable embedding batches instead of traces.
    #[arg(long)]
    pub embeddings: bool,
    /// Embedding mode: number of queries.
    #[arg(long)]
    pub queries: Option<usize>,
    /// Embedding mode: passages per query.
    #[arg(long)]
    pub n: Option<usize>,
    /// Embedding mode: embedding dimension.
    #[arg(long)]
    pub d: Option<usize>,
    /// Embedding mode: gold passages per query.
    #[arg(long)]
    pub gold: Option<usize>,
    #[arg(long, required = true)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<Tokenizer>,
    /// Print the tab-separated table instead of JSON.
    #[arg(long)]
    pub table: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Integrity => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = settings::ConfigFile::load(cli.config.as_deref()).and_then(|file| {
        let settings = settings::Settings::new(file);
        match cli.command {
            Command::Build(a) => commands::build(a, settings),
            Command::Probe(a) => commands::probe(a, settings),
            Command::Filter(a) => commands::filter(a, settings),
            Command::SftFormat(a) => commands::sft_format(a, settings),
            Command::Eval(a) => commands::eval(a, settings),
            Command::Gradcheck(a) => commands::gradcheck(a, settings),
            Command::TrainRethead(a) => commands::train_rethead(a, settings),
            Command::Simulate(a) => commands::simulate(a, settings),
            Command::Stats(a) => commands::stats(a, settings),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            eprintln!("error[{}]: {e}", format!("{kind:?}").to_lowercase());
            ExitCode::from(exit_code(kind))
        }
    }
}
