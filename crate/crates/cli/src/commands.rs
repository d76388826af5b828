use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use cicbench::builder::{build_dataset, sft_example, to_jsonl, BenchmarkInstance, BuildConfig, SftStyle, StatsReport};
use cicbench::corpus::{
    load_corpus, load_queries, read_jsonl, CorpusFormat, Tokenizer, DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_TOKENS,
};
use cicbench::metrics::{aggregate, EvalRecord, RougeVariant};
use cicbench::rap::{
    align_golds, compute_hit_rates, load_traces, preset, rap_filter, rap_pipeline, select_retrieval_heads,
    AttentionTrace, GoldSet, HeadProfile, RapConfig,
};
use cicbench::rethead::{
    gradcheck as run_gradcheck, selection_accuracy, separable_dataset, train_scorer, EmbeddingBatch, Relaxation,
    ScorerParams, TrainConfig,
};
use cicbench::retrieval::{ingest_external_rankings, Bm25Params, PASSAGE_RETRIEVER_DEPTH};
use cicbench::sim::{simulate_trace, Distribution, SimConfig};
use cicbench::{Error, Result};

use crate::manifest::{write_file, RunManifest};
use crate::settings::Settings;
use crate::{
    BuildArgs, EvalArgs, FilterArgs, GradcheckArgs, PresetArgs, ProbeArgs, SftArgs, SimulateArgs, StatsArgs, TrainArgs,
};

/// Comma-separated head ids, e.g. `0,1,2,3`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct HeadList(pub Vec<usize>);

impl FromStr for HeadList {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad head id `{t}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(HeadList)
    }
}

/// Written by `probe`, read by `filter`.
#[derive(Debug, Serialize, Deserialize)]
struct ProfileFile {
    m: usize,
    profiles: Vec<HeadProfile>,
}

#[derive(Serialize)]
struct FilteredIds<'a> {
    query_id: &'a str,
    passage_ids: Vec<String>,
}

#[derive(Serialize)]
struct TrainReport {
    k: usize,
    tau: f64,
    relaxation: Relaxation,
    selection_accuracy: f64,
    final_loss: Option<f64>,
    params: ScorerParams,
    losses: Vec<f64>,
}

fn flag(set: bool) -> Option<bool> {
    set.then_some(true)
}

fn emit(out: Option<&Path>, text: &str, manifest: &RunManifest) -> Result<()> {
    match out {
        Some(path) => {
            write_file(path, text)?;
            manifest.write_next_to(path)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable output") + "\n"
}

fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    read_jsonl(path, |r: T, _| {
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Q and M from flags, config, or the preset named by style/regime/task.
fn rap_settings(s: &mut Settings, p: &PresetArgs, q: Option<Option<usize>>, m: Option<usize>) -> Result<RapConfig> {
    let style = s.optional("style", p.style)?;
    let regime = s.optional("regime", p.regime)?;
    let task = s.optional("task", p.task)?;
    let preset = match (style, regime, task) {
        (Some(st), Some(re), Some(ta)) => Some(preset(st, re, ta).ok_or_else(|| {
            Error::Config(format!("no (Q, M) preset for {st:?}/{re:?}/{ta:?}"))
        })?),
        (None, None, None) => None,
        _ => return Err(Error::Config("a preset needs all of --style, --regime and --task".into())),
    };
    let m = match preset {
        Some(p) => s.value("M", m, p.m)?,
        None => s.required("M", m)?,
    };
    let q = match (q, preset) {
        (None, _) => 1,
        (Some(flag), Some(p)) => s.value("Q", flag, p.q)?,
        (Some(flag), None) => s.required("Q", flag)?,
    };
    RapConfig::new(q, m)
}

pub fn build(a: BuildArgs, mut s: Settings) -> Result<()> {
    let corpus: PathBuf = s.required("corpus", a.corpus)?;
    let queries: PathBuf = s.required("queries", a.queries)?;
    s.record("rankings", &a.rankings);
    let tokenizer = s.value("tokenizer", a.tokenizer, Tokenizer::Whitespace)?;
    let format = if s.value("documents", flag(a.documents), false)? {
        CorpusFormat::Documents {
            max_tokens: s.value("chunk-tokens", a.chunk_tokens, DEFAULT_CHUNK_TOKENS)?,
            overlap_tokens: s.value("chunk-overlap", a.chunk_overlap, DEFAULT_CHUNK_OVERLAP)?,
        }
    } else {
        CorpusFormat::Passages
    };
    let defaults = BuildConfig::default();
    let config = BuildConfig {
        confounding_ratio: s.value("ratio", a.ratio, defaults.confounding_ratio)?,
        token_budget: s.value("budget", a.budget, defaults.token_budget)?,
        k: s.value("k", a.k, PASSAGE_RETRIEVER_DEPTH)?,
        seed: a.seed,
        task_kind: s.optional("task", a.task)?,
        tokenizer,
        bm25: Bm25Params {
            k1: s.value("k1", a.k1, defaults.bm25.k1)?,
            b: s.value("b", a.b, defaults.bm25.b)?,
        },
        use_bm25: !s.value("no-bm25", flag(a.no_bm25), false)?,
        retrieve_with_answer: !s.value("question-only", flag(a.question_only), false)?,
        ..defaults
    };
    let out: Option<PathBuf> = s.optional("out", a.out)?;
    let stats_out: Option<PathBuf> = s.optional("stats-out", a.stats_out)?;
    s.finish()?;

    let kb = load_corpus(&corpus, format, tokenizer)?;
    let qs = load_queries(&queries)?;
    let mut rankings = Vec::new();
    for path in &a.rankings {
        rankings.extend(ingest_external_rankings(path)?);
    }
    let output = build_dataset(&kb, &qs, &rankings, &config)?;

    let mut manifest = RunManifest::new("build", Some(a.seed), s.resolved.clone());
    manifest.add_input(&corpus)?;
    manifest.add_input(&queries)?;
    for path in &a.rankings {
        manifest.add_input(path)?;
    }
    emit(out.as_deref(), &to_jsonl(&output.instances), &manifest)?;
    let stats_path = stats_out.or_else(|| {
        out.as_ref().map(|o| {
            let mut name = o.as_os_str().to_owned();
            name.push(".stats.json");
            PathBuf::from(name)
        })
    });
    if let Some(path) = stats_path {
        write_file(&path, &pretty(&output.stats))?;
    }
    eprint!("{}", output.stats.to_table());
    Ok(())
}

pub fn probe(a: ProbeArgs, mut s: Settings) -> Result<()> {
    let traces_path: PathBuf = s.required("traces", a.traces)?;
    let golds_path: PathBuf = s.required("golds", a.golds)?;
    let rap = rap_settings(&mut s, &a.preset, None, a.m)?;
    let out: Option<PathBuf> = s.optional("out", a.out)?;
    s.finish()?;

    let traces = load_traces(&traces_path)?;
    let golds: Vec<GoldSet> = load_jsonl(&golds_path)?;
    let aligned = align_golds(&traces, &golds)?;
    let profiles = compute_hit_rates(&traces, &aligned, rap.m)?;

    let mut manifest = RunManifest::new("probe", None, s.resolved.clone());
    manifest.add_input(&traces_path)?;
    manifest.add_input(&golds_path)?;
    emit(out.as_deref(), &pretty(&ProfileFile { m: rap.m, profiles }), &manifest)
}

pub fn filter(a: FilterArgs, mut s: Settings) -> Result<()> {
    let traces_path: PathBuf = s.required("traces", a.traces)?;
    let profiles_path: PathBuf = s.required("profiles", a.profiles)?;
    let rap = rap_settings(&mut s, &a.preset, Some(a.q), a.m)?;
    let dataset: Option<PathBuf> = s.optional("dataset", a.dataset)?;
    let out: Option<PathBuf> = s.optional("out", a.out)?;
    s.finish()?;

    let mut traces = load_traces(&traces_path)?;
    traces.sort_by(|x, y| x.query_id.cmp(&y.query_id));
    let profiles: ProfileFile = load_json(&profiles_path)?;
    let heads = select_retrieval_heads(&profiles.profiles, rap.q)?;
    eprintln!("retrieval heads: {heads:?}");

    let mut manifest = RunManifest::new("filter", None, s.resolved.clone());
    manifest.add_input(&traces_path)?;
    manifest.add_input(&profiles_path)?;

    let text = match &dataset {
        Some(path) => {
            manifest.add_input(path)?;
            let by_id: BTreeMap<&str, &AttentionTrace> = traces.iter().map(|t| (t.query_id.as_str(), t)).collect();
            let mut instances: Vec<BenchmarkInstance> = load_jsonl(path)?;
            instances.sort_by(|x, y| x.query_id.cmp(&y.query_id));
            let mut filtered = Vec::with_capacity(instances.len());
            for inst in &instances {
                let trace = by_id
                    .get(inst.query_id.as_str())
                    .ok_or_else(|| Error::Integrity(format!("no trace for query `{}`", inst.query_id)))?;
                let f = rap_pipeline(inst, trace, rap, &heads)?;
                if !f.missing_gold.is_empty() {
                    eprintln!("{}: dropped gold {:?}", f.query_id, f.missing_gold);
                }
                filtered.push(f);
            }
            to_jsonl(&filtered)
        }
        None => {
            let rows = traces
                .iter()
                .map(|t| {
                    Ok(FilteredIds {
                        query_id: &t.query_id,
                        passage_ids: rap_filter(t, &heads, rap.m)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            to_jsonl(&rows)
        }
    };
    emit(out.as_deref(), &text, &manifest)
}

pub fn sft_format(a: SftArgs, mut s: Settings) -> Result<()> {
    let dataset: PathBuf = s.required("dataset", a.dataset)?;
    let style = s.value("style", a.style, SftStyle::Da)?;
    let out: Option<PathBuf> = s.optional("out", a.out)?;
    s.finish()?;

    let mut instances: Vec<BenchmarkInstance> = load_jsonl(&dataset)?;
    instances.sort_by(|x, y| x.query_id.cmp(&y.query_id));
    let examples = instances
        .iter()
        .map(|i| sft_example(i, style))
        .collect::<Result<Vec<_>>>()?;
    for ex in &examples {
        for w in &ex.warnings {
            eprintln!("{}: {w}", ex.query_id);
        }
    }
    let mut manifest = RunManifest::new("sft-format", None, s.resolved.clone());
    manifest.add_input(&dataset)?;
    emit(out.as_deref(), &to_jsonl(&examples), &manifest)
}

pub fn eval(a: EvalArgs, mut s: Settings) -> Result<()> {
    let predictions: PathBuf = s.required("predictions", a.predictions)?;
    let task = s.required("task", a.task)?;
    let rouge = s.value("rouge", a.rouge, RougeVariant::L)?;
    let out: Option<PathBuf> = s.optional("out", a.out)?;
    s.finish()?;

    let records: Vec<EvalRecord> = load_jsonl(&predictions)?;
    let report = pretty(&aggregate(&records, task, rouge)?);
    let mut manifest = RunManifest::new("eval", None, s.resolved.clone());
    manifest.add_input(&predictions)?;
    if out.is_some() {
        print!("{report}");
    }
    emit(out.as_deref(), &report, &manifest)
}

pub fn gradcheck(a: GradcheckArgs, mut s: Settings) -> Result<()> {
    let n = s.value("n", a.n, 8usize)?;
    let k = s.value("k", a.k, 2usize)?;
    let tau = s.value("tau", a.tau, 0.5f64)?;
    let trials = s.value("trials", a.trials, 100usize)?;
    let eps = s.value("eps", a.eps, 1e-5f64)?;
    let tol = s.value("tol", a.tol, 1e-3f64)?;
    let out: Option<PathBuf> = s.optional("out", a.out)?;
    s.finish()?;

    let report = run_gradcheck(n, k, tau, trials, eps, a.seed)?;
    let manifest = RunManifest::new("gradcheck", Some(a.seed), s.resolved.clone());
    emit(out.as_deref(), &pretty(&report), &manifest)?;
    eprintln!("max relative error {:.3e} over {trials} trials", report.max_rel_error);
    if report.max_rel_error >= tol {
        return Err(Error::Numeric(format!(
            "max relative error {:.3e} is not below {tol:.1e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

fn load_batches(path: &Path) -> Result<Vec<EmbeddingBatch>> {
    let batches: Vec<EmbeddingBatch> = load_jsonl(path)?;
    for (i, b) in batches.iter().enumerate() {
        b.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(batches)
}

pub fn train_rethead(a: TrainArgs, mut s: Settings) -> Result<()> {
    let data_path: PathBuf = s.required("data", a.data)?;
    let eval_path: Option<PathBuf> = s.optional("eval-data", a.eval_data)?;
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        k: s.value("k", a.k, defaults.k)?,
        tau: s.value("tau", a.tau, defaults.tau)?,
        steps: s.value("steps", a.steps, defaults.steps)?,
        step_size: s.value("step-size", a.step_size, defaults.step_size)?,
        batch_size: s.value("batch-size", a.batch_size, defaults.batch_size)?,
        seed: a.seed,
        relaxation: if s.value("straight-through", flag(a.straight_through), false)? {
            Relaxation::StraightThrough
        } else {
            Relaxation::Relaxed
        },
    };
    let hidden_flag = s.optional("hidden", a.hidden)?;
    let out: Option<PathBuf> = s.optional("out", a.out)?;

    let data = load_batches(&data_path)?;
    let dim = data
        .first()
        .map(|b| b.h_q.len())
        .ok_or_else(|| Error::Config("training data is empty".into()))?;
    let hidden = hidden_flag.unwrap_or(dim);
    s.record("hidden", &hidden);
    s.finish()?;
    let eval_data = match &eval_path {
        Some(p) => load_batches(p)?,
        None => data.clone(),
    };

    let outcome = train_scorer(ScorerParams::init(dim, hidden, a.seed), &data, &config)?;
    let accuracy = selection_accuracy(&outcome.params, &eval_data, config.k)?;
    eprintln!(
        "final loss {:.4}, selection accuracy {accuracy:.4}",
        outcome.losses.last().copied().unwrap_or(f64::NAN)
    );
    let report = TrainReport {
        k: config.k,
        tau: config.tau,
        relaxation: config.relaxation,
        selection_accuracy: accuracy,
        final_loss: outcome.losses.last().copied(),
        params: outcome.params,
        losses: outcome.losses,
    };
    let mut manifest = RunManifest::new("train-rethead", Some(a.seed), s.resolved.clone());
    manifest.add_input(&data_path)?;
    if let Some(p) = &eval_path {
        manifest.add_input(p)?;
    }
    emit(out.as_deref(), &pretty(&report), &manifest)
}

pub fn simulate(a: SimulateArgs, mut s: Settings) -> Result<()> {
    let out: Option<PathBuf> = s.optional("out", a.out)?;
    if s.value("embeddings", flag(a.embeddings), false)? {
        let queries = s.value("queries", a.queries, 500usize)?;
        let n = s.value("n", a.n, 20usize)?;
        let d = s.value("d", a.d, 16usize)?;
        let gold = s.value("gold", a.gold, 2usize)?;
        s.finish()?;
        let batches = separable_dataset(queries, n, d, gold, a.seed)?;
        let manifest = RunManifest::new("simulate", Some(a.seed), s.resolved.clone());
        return emit(out.as_deref(), &to_jsonl(&batches), &manifest);
    }

    let dataset: PathBuf = s.required("dataset", a.dataset)?;
    let config = SimConfig {
        heads: s.value("heads", a.heads, 32usize)?,
        retrieval_heads: s.required::<HeadList>("retrieval-heads", a.retrieval_heads)?.0,
        kappa: s.value("kappa", a.kappa, 0.9f64)?,
        noise_seed: a.seed,
        distribution: s.value("distribution", a.distribution, Distribution::DirichletLike)?,
    };
    s.finish()?;

    let mut instances: Vec<BenchmarkInstance> = load_jsonl(&dataset)?;
    instances.sort_by(|x, y| x.query_id.cmp(&y.query_id));
    let traces = instances
        .iter()
        .map(|i| simulate_trace(i, &config).map_err(|e| Error::Query { query_id: i.query_id.clone(), source: Box::new(e) }))
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = RunManifest::new("simulate", Some(a.seed), s.resolved.clone());
    manifest.add_input(&dataset)?;
    emit(out.as_deref(), &to_jsonl(&traces), &manifest)
}

pub fn stats(a: StatsArgs, mut s: Settings) -> Result<()> {
    let dataset: PathBuf = s.required("dataset", a.dataset)?;
    let tokenizer = s.value("tokenizer", a.tokenizer, Tokenizer::Whitespace)?;
    let table = s.value("table", flag(a.table), false)?;
    let out: Option<PathBuf> = s.optional("out", a.out)?;
    s.finish()?;

    let instances: Vec<BenchmarkInstance> = load_jsonl(&dataset)?;
    let report = StatsReport::compute(&instances, tokenizer);
    let text = if table { report.to_table() } else { pretty(&report) };
    let mut manifest = RunManifest::new("stats", None, s.resolved.clone());
    manifest.add_input(&dataset)?;
    emit(out.as_deref(), &text, &manifest)
}
