//! Benchmark instance assembly.
//!
//! For each query the rankings of every retriever are pooled, filtered into
//! confounders, mixed with randomly sampled passages according to the
//! confounding ratio, packed up to the token budget together with the gold
//! passages, and shuffled. Instances render to corpus-in-context prompts and
//! to supervised targets in three styles.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{KnowledgeBase, Passage, QueryInstance, TaskKind, Tokenizer};
use crate::error::{Error, Result};
use crate::retrieval::{pool_rankings, Bm25Params, InvertedIndex, RankedList, PASSAGE_RETRIEVER_DEPTH};
use crate::seed::{derive_seed, rng_for};

pub const RETRIEVAL_OPEN: &str = "<RETRIEVAL>";
pub const RETRIEVAL_CLOSE: &str = "</RETRIEVAL>";

/// The confounding ratios swept when comparing random and retrieved
/// distractors.
pub const RATIO_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SftStyle {
    /// Answer only.
    #[default]
    Da,
    /// Gold passages copied verbatim inside the retrieval block, then the answer.
    Rta,
    /// Gold passage ids inside the retrieval block, then the answer.
    Cci,
}

impl std::str::FromStr for SftStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DA" => Ok(SftStyle::Da),
            "RTA" => Ok(SftStyle::Rta),
            "CCI" => Ok(SftStyle::Cci),
            _ => Err(Error::Config(format!("unknown SFT style `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub confounding_ratio: f64,
    pub token_budget: usize,
    /// Depth of the built-in BM25 retriever.
    pub k: usize,
    pub seed: u64,
    /// When set, every query must be of this kind.
    pub task_kind: Option<TaskKind>,
    pub sft_style: SftStyle,
    pub tokenizer: Tokenizer,
    pub bm25: Bm25Params,
    /// Retrieve with the BM25 index built over the knowledge base.
    pub use_bm25: bool,
    /// Query BM25 with `q + " " + a` rather than `q` alone.
    pub retrieve_with_answer: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            confounding_ratio: 1.0,
            token_budget: 32_768,
            k: PASSAGE_RETRIEVER_DEPTH,
            seed: 0,
            task_kind: None,
            sft_style: SftStyle::Da,
            tokenizer: Tokenizer::Whitespace,
            bm25: Bm25Params::default(),
            use_bm25: true,
            retrieve_with_answer: true,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confounding_ratio) {
            return Err(Error::Config(format!(
                "confounding ratio must lie in [0, 1], got {}",
                self.confounding_ratio
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("retrieval depth K must be at least 1".into()));
        }
        self.bm25.validate()
    }
}

/// A query together with its shuffled contextual knowledge base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkInstance {
    pub query_id: String,
    pub task_kind: TaskKind,
    pub q: String,
    pub a: String,
    pub context: Vec<Passage>,
    pub gold_ids: BTreeSet<String>,
    pub gold_positions: Vec<usize>,
    /// Number of confounders that came from the retrievers.
    pub retrieved_count: usize,
    /// Realized fraction of confounders that came from the retrievers.
    pub p_used: f64,
    pub seed: u64,
    /// Gold ids no longer present in `context` (only after filtering).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing_gold: Vec<String>,
}

impl BenchmarkInstance {
    pub fn confounder_count(&self) -> usize {
        self.context.len() - self.gold_positions.len()
    }

    /// Positions of `gold_ids` within `ctx`, ascending, and the gold ids absent from it.
    pub fn locate_gold(gold_ids: &BTreeSet<String>, ctx: &[Passage]) -> (Vec<usize>, Vec<String>) {
        let positions: Vec<usize> = ctx
            .iter()
            .enumerate()
            .filter(|(_, p)| gold_ids.contains(&p.id))
            .map(|(i, _)| i)
            .collect();
        let present: HashSet<&str> = positions.iter().map(|&i| ctx[i].id.as_str()).collect();
        let missing = gold_ids
            .iter()
            .filter(|id| !present.contains(id.as_str()))
            .cloned()
            .collect();
        (positions, missing)
    }
}

/// Lowercase and collapse runs of whitespace to a single space.
pub fn normalize_for_match(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Answer normalization for the leak filter: [`normalize_for_match`] plus
/// stripping leading and trailing punctuation.
pub fn normalize_answer(answer: &str) -> String {
    normalize_for_match(answer)
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Confounder admission rules for one query: not gold, not from a gold
/// passage's source document, and not containing the answer.
#[derive(Debug, Clone)]
pub struct ConfounderFilter {
    gold_ids: HashSet<String>,
    gold_docs: HashSet<String>,
    answer: String,
}

impl ConfounderFilter {
    pub fn new(kb: &KnowledgeBase, gold_ids: &BTreeSet<String>, answer: &str) -> Result<Self> {
        let mut gold_docs = HashSet::new();
        for id in gold_ids {
            gold_docs.insert(kb.require(id)?.source_document().to_string());
        }
        Ok(ConfounderFilter {
            gold_ids: gold_ids.iter().cloned().collect(),
            gold_docs,
            answer: normalize_answer(answer),
        })
    }

    pub fn admits(&self, passage: &Passage) -> bool {
        if self.gold_ids.contains(&passage.id) || self.gold_docs.contains(passage.source_document()) {
            return false;
        }
        // an empty normalized answer would match everything
        self.answer.is_empty() || !normalize_for_match(&passage.text).contains(&self.answer)
    }
}

/// Filter pooled retrieval results down to admissible confounders,
/// preserving pooled order.
pub fn mine_confounders(
    pooled_ids: &[String],
    kb: &KnowledgeBase,
    gold_ids: &BTreeSet<String>,
    answer: &str,
) -> Result<Vec<String>> {
    let filter = ConfounderFilter::new(kb, gold_ids, answer)?;
    let mut out = Vec::with_capacity(pooled_ids.len());
    for id in pooled_ids {
        if filter.admits(kb.require(id)?) {
            out.push(id.clone());
        }
    }
    Ok(out)
}

/// Number of retrieved confounders among `slots` at ratio `p`.
pub fn retrieved_slots(p: f64, slots: usize) -> usize {
    ((p * slots as f64).round() as usize).min(slots)
}

/// Admissible random-pool passages not among `retrieved`, in a seeded
/// uniformly random order. Every random sample is a prefix of this list.
fn random_candidates(
    pool: &KnowledgeBase,
    retrieved: &[String],
    filter: &ConfounderFilter,
    seed: u64,
) -> Vec<String> {
    let excluded: HashSet<&str> = retrieved.iter().map(String::as_str).collect();
    let mut ids: Vec<String> = pool
        .passages()
        .iter()
        .filter(|p| !excluded.contains(p.id.as_str()) && filter.admits(p))
        .map(|p| p.id.clone())
        .collect();
    ids.shuffle(&mut rng_for(seed, &["mix"]));
    ids
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedConfounders {
    /// Retrieved confounders first, then random ones.
    pub ids: Vec<String>,
    pub retrieved_count: usize,
}

/// Take `round(p·slots)` confounders from the head of `retrieved` and fill
/// the remaining slots with passages sampled uniformly without replacement
/// from `random_pool`. Random samples never repeat a retrieved id.
pub fn mix_confounders(
    retrieved: &[String],
    random_pool: &KnowledgeBase,
    p: f64,
    slots: usize,
    seed: u64,
    filter: &ConfounderFilter,
) -> Result<MixedConfounders> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("confounding ratio must lie in [0, 1], got {p}")));
    }
    let n_retrieved = retrieved_slots(p, slots);
    let n_random = slots - n_retrieved;
    if retrieved.len() < n_retrieved {
        return Err(Error::BudgetUnderflow {
            pool: "retrieved",
            needed: n_retrieved,
            available: retrieved.len(),
        });
    }
    let candidates = random_candidates(random_pool, retrieved, filter, seed);
    if candidates.len() < n_random {
        return Err(Error::BudgetUnderflow {
            pool: "random",
            needed: n_random,
            available: candidates.len(),
        });
    }
    let mut ids: Vec<String> = retrieved[..n_retrieved].to_vec();
    ids.extend(candidates.into_iter().take(n_random));
    Ok(MixedConfounders {
        ids,
        retrieved_count: n_retrieved,
    })
}

/// Serialized form of one passage inside a prompt.
pub fn passage_block(passage: &Passage) -> String {
    format!("ID: {}\nTitle: {}\nContext: {}", passage.id, passage.title, passage.text)
}

/// Budget cost of a passage: the tokens of its rendered block.
pub fn passage_cost(passage: &Passage, tokenizer: Tokenizer) -> usize {
    tokenizer.count_tokens(&passage_block(passage))
}

pub fn render_corpus(passages: &[Passage]) -> String {
    passages.iter().map(passage_block).collect::<Vec<_>>().join("\n\n")
}

pub fn render_prompt_with(task: TaskKind, passages: &[Passage], query: &str) -> String {
    let corpus = render_corpus(passages);
    match task {
        TaskKind::Qa => format!(
            "[INST] Please answer the following question given the following passages:\n{corpus}\nQuestion: {query}\nAnswer: [/INST]"
        ),
        TaskKind::FactVerification => format!(
            "[INST] According to the following passages, please verify the given claim and predict your judgment on its factuality as TRUE or FALSE:\n{corpus}\nClaim: {query}\nJudgement: [/INST]"
        ),
        TaskKind::DialogueCompletion => format!(
            "[INST] According to the given passages, please provide a single response to complete the following conversation by role-playing as either Person A or Person B. Your response should be as knowledgeable and coherent with the conversation history as possible:\n{corpus}\nConversation: {query}\n[/INST]"
        ),
    }
}

pub fn render_prompt(instance: &BenchmarkInstance) -> String {
    render_prompt_with(instance.task_kind, &instance.context, &instance.q)
}

/// Tokens taken by the prompt template and query with an empty corpus.
pub fn prompt_overhead(task: TaskKind, query: &str, tokenizer: Tokenizer) -> usize {
    tokenizer.count_tokens(&render_prompt_with(task, &[], query))
}

fn gold_in_context(instance: &BenchmarkInstance) -> Result<Vec<&Passage>> {
    let (positions, missing) = BenchmarkInstance::locate_gold(&instance.gold_ids, &instance.context);
    if !missing.is_empty() {
        return Err(Error::Integrity(format!(
            "query `{}`: gold passages {missing:?} are not in the context",
            instance.query_id
        )));
    }
    Ok(positions.into_iter().map(|i| &instance.context[i]).collect())
}

/// Supervised target in the requested style. Gold passages appear in
/// context order.
pub fn render_sft_target(instance: &BenchmarkInstance, style: SftStyle) -> Result<String> {
    let body = match style {
        SftStyle::Da => return Ok(instance.a.clone()),
        SftStyle::Rta => gold_in_context(instance)?
            .iter()
            .map(|p| p.text.as_str())
            .collect::<Vec<_>>()
            .join("\n"),
        SftStyle::Cci => gold_in_context(instance)?
            .iter()
            .map(|p| p.id.as_str())
            .collect::<Vec<_>>()
            .join(", "),
    };
    Ok(format!("{RETRIEVAL_OPEN}{body}{RETRIEVAL_CLOSE}{}", instance.a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub query_id: String,
    pub prompt: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub fn sft_example(instance: &BenchmarkInstance, style: SftStyle) -> Result<SftExample> {
    let mut warnings = Vec::new();
    if instance.a.trim().is_empty() {
        warnings.push("empty answer".to_string());
    }
    Ok(SftExample {
        query_id: instance.query_id.clone(),
        prompt: render_prompt(instance),
        target: render_sft_target(instance, style)?,
        warnings,
    })
}

/// Pack gold plus the longest confounder prefix that fits
/// `token_budget - prompt_overhead`, then shuffle. Returns the context and
/// the post-shuffle gold positions (ascending).
pub fn assemble_context(
    gold: Vec<Passage>,
    confounders: Vec<Passage>,
    token_budget: usize,
    prompt_overhead: usize,
    seed: u64,
    tokenizer: Tokenizer,
) -> Result<(Vec<Passage>, Vec<usize>)> {
    let gold_cost: usize = gold.iter().map(|p| passage_cost(p, tokenizer)).sum();
    let available = token_budget
        .checked_sub(prompt_overhead + gold_cost)
        .ok_or_else(|| {
            Error::Config(format!(
                "gold passages ({gold_cost} tokens) plus prompt overhead ({prompt_overhead}) exceed the budget of {token_budget}"
            ))
        })?;
    let gold_ids: BTreeSet<String> = gold.iter().map(|p| p.id.clone()).collect();
    let mut ctx = gold;
    let mut used = 0;
    for passage in confounders {
        let cost = passage_cost(&passage, tokenizer);
        if used + cost > available {
            break;
        }
        used += cost;
        ctx.push(passage);
    }
    ctx.shuffle(&mut rng_for(seed, &["shuffle"]));
    let (positions, _) = BenchmarkInstance::locate_gold(&gold_ids, &ctx);
    Ok((ctx, positions))
}

/// Build one instance. `rankings` are this query's external rankings.
pub fn build_instance(
    query: &QueryInstance,
    kb: &KnowledgeBase,
    index: Option<&InvertedIndex>,
    rankings: &[RankedList],
    config: &BuildConfig,
) -> Result<BenchmarkInstance> {
    query.validate_against(kb)?;
    if let Some(kind) = config.task_kind {
        if kind != query.task_kind {
            return Err(Error::Config(format!(
                "query is {} but the build is restricted to {kind}",
                query.task_kind
            )));
        }
    }
    let instance_seed = derive_seed(config.seed, &[&query.query_id]);

    let mut lists: Vec<RankedList> = rankings.to_vec();
    if let Some(index) = index {
        let text = if config.retrieve_with_answer {
            format!("{} {}", query.q, query.a)
        } else {
            query.q.clone()
        };
        lists.push(index.retrieve_topk(&query.query_id, &text, config.k, config.bm25)?);
    }
    if lists.is_empty() {
        return Err(Error::Config("no rankings and no index to retrieve from".into()));
    }
    let total: usize = lists.iter().map(RankedList::len).sum();
    let pooled = pool_rankings(&lists, total, config.seed)?;
    let mined = mine_confounders(&pooled, kb, &query.gold_ids, &query.a)?;
    let filter = ConfounderFilter::new(kb, &query.gold_ids, &query.a)?;

    let tok = config.tokenizer;
    let gold: Vec<Passage> = query.gold_ids.iter().map(|id| kb.require(id).cloned()).collect::<Result<_>>()?;
    let overhead = prompt_overhead(query.task_kind, &query.q, tok);
    let gold_cost: usize = gold.iter().map(|p| passage_cost(p, tok)).sum();
    let available = config.token_budget.checked_sub(overhead + gold_cost).ok_or_else(|| {
        Error::Config(format!(
            "gold passages ({gold_cost} tokens) plus prompt overhead ({overhead}) exceed the budget of {}",
            config.token_budget
        ))
    })?;

    // Largest slot count whose retrieved/random split fits the budget.
    let randoms = random_candidates(kb, &mined, &filter, instance_seed);
    let prefix_costs = |ids: &[String]| -> Result<Vec<usize>> {
        let mut acc = vec![0];
        for id in ids {
            acc.push(acc.last().unwrap() + passage_cost(kb.require(id)?, tok));
        }
        Ok(acc)
    };
    let mined_cost = prefix_costs(&mined)?;
    let random_cost = prefix_costs(&randoms)?;
    let p = config.confounding_ratio;
    let mut slots = 0;
    loop {
        let next = slots + 1;
        let n_ret = retrieved_slots(p, next);
        let n_rand = next - n_ret;
        if n_ret > mined.len() || n_rand > randoms.len() || mined_cost[n_ret] + random_cost[n_rand] > available {
            break;
        }
        slots = next;
    }

    let mixed = mix_confounders(&mined, kb, p, slots, instance_seed, &filter)?;
    let confounders: Vec<Passage> = mixed.ids.iter().map(|id| kb.require(id).cloned()).collect::<Result<_>>()?;
    let (context, gold_positions) =
        assemble_context(gold, confounders, config.token_budget, overhead, instance_seed, tok)?;
    let n_conf = context.len() - gold_positions.len();
    debug_assert_eq!(n_conf, slots);
    Ok(BenchmarkInstance {
        query_id: query.query_id.clone(),
        task_kind: query.task_kind,
        q: query.q.clone(),
        a: query.a.clone(),
        context,
        gold_ids: query.gold_ids.clone(),
        gold_positions,
        retrieved_count: mixed.retrieved_count,
        p_used: if n_conf == 0 {
            0.0
        } else {
            mixed.retrieved_count as f64 / n_conf as f64
        },
        seed: config.seed,
        missing_gold: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub num_instances: usize,
    /// Mean passages per context.
    pub avg_ctx: f64,
    /// Mean rendered prompt length in tokens.
    pub avg_tokens: f64,
    /// Mean gold passages per query.
    pub avg_prov: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub tokenizer: Tokenizer,
    pub tasks: BTreeMap<TaskKind, TaskStats>,
}

impl StatsReport {
    pub fn compute(instances: &[BenchmarkInstance], tokenizer: Tokenizer) -> Self {
        let mut sums: BTreeMap<TaskKind, (usize, usize, usize, usize)> = BTreeMap::new();
        for inst in instances {
            let s = sums.entry(inst.task_kind).or_default();
            s.0 += 1;
            s.1 += inst.context.len();
            s.2 += tokenizer.count_tokens(&render_prompt(inst));
            s.3 += inst.gold_ids.len();
        }
        let tasks = sums
            .into_iter()
            .map(|(task, (n, ctx, tokens, prov))| {
                let n_f = n as f64;
                (
                    task,
                    TaskStats {
                        num_instances: n,
                        avg_ctx: ctx as f64 / n_f,
                        avg_tokens: tokens as f64 / n_f,
                        avg_prov: prov as f64 / n_f,
                    },
                )
            })
            .collect();
        StatsReport { tokenizer, tasks }
    }

    /// Plain-text table with `#CTX`, `#Tokens` and `#Prov` columns.
    pub fn to_table(&self) -> String {
        let mut out = String::from("Task\t#CTX\t#Tokens\t#Prov\n");
        for (task, s) in &self.tasks {
            out.push_str(&format!("{task}\t{}\t{}\t{}\n", fmt_avg(s.avg_ctx), fmt_avg(s.avg_tokens), fmt_avg(s.avg_prov)));
        }
        out
    }
}

fn fmt_avg(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub instances: Vec<BenchmarkInstance>,
    pub stats: StatsReport,
}

/// Build every query. External rankings are matched to queries by id;
/// instances come back ordered by query id.
pub fn build_dataset(
    kb: &KnowledgeBase,
    queries: &[QueryInstance],
    rankings: &[RankedList],
    config: &BuildConfig,
) -> Result<BuildOutput> {
    config.validate()?;
    let index = if config.use_bm25 {
        Some(InvertedIndex::build(kb)?)
    } else {
        None
    };
    let mut by_query: HashMap<&str, Vec<RankedList>> = HashMap::new();
    for list in rankings {
        by_query.entry(list.query_id.as_str()).or_default().push(list.clone());
    }
    let mut seen = HashSet::new();
    let mut instances = Vec::with_capacity(queries.len());
    for query in queries {
        if !seen.insert(query.query_id.as_str()) {
            return Err(Error::Integrity(format!("duplicate query id `{}`", query.query_id)));
        }
        let lists = by_query.get(query.query_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let instance = build_instance(query, kb, index.as_ref(), lists, config)
            .map_err(|e| e.for_query(&query.query_id))?;
        instances.push(instance);
    }
    instances.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let stats = StatsReport::compute(&instances, config.tokenizer);
    Ok(BuildOutput { instances, stats })
}

/// One JSON line per instance.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable record"));
        out.push('\n');
    }
    out
}
