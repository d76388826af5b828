//! Retrieval-attention probing.
//!
//! Attention traces give, for every head, the attention mass it puts on
//! each passage of a context. A head's hit rate is the mean fraction of gold
//! passages found among its Top-M passages over a validation set; the Q
//! heads with the highest hit rates become retrieval heads, and a context is
//! filtered to the union of their Top-M passages.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::builder::BenchmarkInstance;
use crate::corpus::read_jsonl;
use crate::error::{Error, Result};

/// Per-head, per-passage attention mass for one query. Heads are indexed
/// globally; a (layer, head) pair of a model is one head id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub query_id: String,
    pub passage_ids: Vec<String>,
    /// `scores[h][c]`: mass of head `h` on passage `c`.
    pub scores: Vec<Vec<f64>>,
}

impl AttentionTrace {
    pub fn new(query_id: impl Into<String>, passage_ids: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self> {
        let trace = AttentionTrace {
            query_id: query_id.into(),
            passage_ids,
            scores,
        };
        trace.validate()?;
        Ok(trace)
    }

    /// Combine one matrix per generated token by element-wise max.
    pub fn from_token_matrices(
        query_id: impl Into<String>,
        passage_ids: Vec<String>,
        matrices: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        let query_id = query_id.into();
        let Some((first, rest)) = matrices.split_first() else {
            return Err(Error::Integrity(format!("trace `{query_id}` has no token matrices")));
        };
        let mut scores = first.clone();
        for m in rest {
            if m.len() != scores.len() || m.iter().zip(&scores).any(|(a, b)| a.len() != b.len()) {
                return Err(Error::Integrity(format!("trace `{query_id}`: token matrices differ in shape")));
            }
            for (row, other) in scores.iter_mut().zip(m) {
                for (v, &o) in row.iter_mut().zip(other) {
                    *v = v.max(o);
                }
            }
        }
        AttentionTrace::new(query_id, passage_ids, scores)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.is_empty() {
            return Err(Error::Integrity(format!("trace `{}` has no heads", self.query_id)));
        }
        let width = self.passage_ids.len();
        for (h, row) in self.scores.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Integrity(format!(
                    "trace `{}`: head {h} has {} scores for {width} passages",
                    self.query_id,
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::Integrity(format!(
                    "trace `{}`: head {h} has invalid score {v}",
                    self.query_id
                )));
            }
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.scores.len()
    }

    pub fn num_passages(&self) -> usize {
        self.passage_ids.len()
    }
}

#[derive(Deserialize)]
struct TraceRecord {
    query_id: String,
    passage_ids: Vec<String>,
    #[serde(default)]
    scores: Option<Vec<Vec<f64>>>,
    /// One `[H][|C|]` matrix per generated retrieval token.
    #[serde(default)]
    token_scores: Option<Vec<Vec<Vec<f64>>>>,
}

pub fn load_traces(path: &Path) -> Result<Vec<AttentionTrace>> {
    let mut out = Vec::new();
    read_jsonl(path, |r: TraceRecord, _| {
        let trace = match (r.scores, r.token_scores) {
            (Some(scores), None) => AttentionTrace::new(r.query_id, r.passage_ids, scores)?,
            (None, Some(tokens)) => AttentionTrace::from_token_matrices(r.query_id, r.passage_ids, &tokens)?,
            _ => {
                return Err(Error::Integrity(format!(
                    "trace `{}` needs exactly one of `scores` or `token_scores`",
                    r.query_id
                )))
            }
        };
        out.push(trace);
        Ok(())
    })?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadProfile {
    pub head_id: usize,
    pub hit_rate: f64,
}

/// Gold passage ids of one validation query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSet {
    pub query_id: String,
    pub gold_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RapConfig {
    /// Number of retrieval heads.
    pub q: usize,
    /// Passages kept per head.
    pub m: usize,
}

impl RapConfig {
    pub fn new(q: usize, m: usize) -> Result<Self> {
        if q == 0 || m == 0 {
            return Err(Error::Config(format!("Q and M must be at least 1 (got Q={q}, M={m})")));
        }
        Ok(RapConfig { q, m })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ProbedStyle {
    Da,
    Rta,
}

/// Which benchmark the contexts come from: retriever-mined confounders, or
/// random LOFT-style filler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Confounded,
    Loft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    Nq,
    HotpotQa,
    Fever,
    Wow,
}

macro_rules! parse_enum {
    ($ty:ty, $what:literal, { $($name:literal => $val:expr),* $(,)? }) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($val),)*
                    _ => Err(Error::Config(format!(concat!("unknown ", $what, " `{}`"), s))),
                }
            }
        }
    };
}

parse_enum!(ProbedStyle, "style", { "da" => ProbedStyle::Da, "rta" => ProbedStyle::Rta });
parse_enum!(Regime, "regime", { "confounded" => Regime::Confounded, "loft" => Regime::Loft });
parse_enum!(ProbeTask, "task", {
    "nq" => ProbeTask::Nq,
    "hotpotqa" => ProbeTask::HotpotQa,
    "hpqa" => ProbeTask::HotpotQa,
    "fever" => ProbeTask::Fever,
    "wow" => ProbeTask::Wow,
});

/// Tuned (Q, M) settings per fine-tuning style, regime and task. The LOFT
/// regime has no fact-verification task.
pub fn preset(style: ProbedStyle, regime: Regime, task: ProbeTask) -> Option<RapConfig> {
    use ProbeTask::*;
    use ProbedStyle::*;
    use Regime::*;
    let (q, m) = match (style, regime, task) {
        (Da, Confounded, Nq) => (4, 1),
        (Da, Confounded, HotpotQa) => (8, 1),
        (Da, Confounded, Fever) => (4, 4),
        (Da, Confounded, Wow) => (4, 4),
        (Da, Loft, Nq) => (4, 4),
        (Da, Loft, HotpotQa) => (4, 4),
        (Da, Loft, Wow) => (8, 2),
        (Rta, Confounded, Nq) => (2, 1),
        (Rta, Confounded, HotpotQa) => (2, 1),
        (Rta, Confounded, Fever) => (2, 8),
        (Rta, Confounded, Wow) => (4, 8),
        (Rta, Loft, Nq) => (8, 4),
        (Rta, Loft, HotpotQa) => (4, 2),
        (Rta, Loft, Wow) => (8, 2),
        (_, Loft, Fever) => return None,
    };
    Some(RapConfig { q, m })
}

/// Positions of the `m` highest-scoring passages for `head`, ties broken by
/// position; returned in ascending position order.
pub fn top_m_positions(trace: &AttentionTrace, head: usize, m: usize) -> Result<Vec<usize>> {
    let row = trace.scores.get(head).ok_or_else(|| {
        Error::Config(format!("head {head} out of range (trace has {} heads)", trace.num_heads()))
    })?;
    if m == 0 {
        return Err(Error::Config("M must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(m);
    order.sort_unstable();
    Ok(order)
}

pub fn top_m_passages(trace: &AttentionTrace, head: usize, m: usize) -> Result<BTreeSet<String>> {
    Ok(top_m_positions(trace, head, m)?
        .into_iter()
        .map(|i| trace.passage_ids[i].clone())
        .collect())
}

/// Hit rate of every head over aligned `(trace, gold)` pairs.
pub fn compute_hit_rates(traces: &[AttentionTrace], golds: &[GoldSet], m: usize) -> Result<Vec<HeadProfile>> {
    if traces.is_empty() {
        return Err(Error::Config("need at least one validation trace".into()));
    }
    if traces.len() != golds.len() {
        return Err(Error::Integrity(format!(
            "{} traces but {} gold sets",
            traces.len(),
            golds.len()
        )));
    }
    let heads = traces[0].num_heads();
    // per query: for each head, the number of gold passages in its Top-M
    let mut per_query: Vec<(Vec<usize>, usize)> = Vec::with_capacity(traces.len());
    for (trace, gold) in traces.iter().zip(golds) {
        if trace.query_id != gold.query_id {
            return Err(Error::Integrity(format!(
                "trace `{}` is paired with gold set `{}`",
                trace.query_id, gold.query_id
            )));
        }
        if gold.gold_ids.is_empty() {
            return Err(Error::Integrity(format!("query `{}` has no gold passages", gold.query_id)));
        }
        if trace.num_heads() != heads {
            return Err(Error::Integrity(format!(
                "trace `{}` has {} heads, expected {heads}",
                trace.query_id,
                trace.num_heads()
            )));
        }
        let hits = (0..heads)
            .map(|h| {
                Ok(top_m_positions(trace, h, m)?
                    .into_iter()
                    .filter(|&i| gold.gold_ids.contains(&trace.passage_ids[i]))
                    .count())
            })
            .collect::<Result<Vec<_>>>()?;
        per_query.push((hits, gold.gold_ids.len()));
    }
    let n = traces.len() as f64;
    Ok((0..heads)
        .map(|h| {
            let sum: f64 = per_query.iter().map(|(hits, g)| hits[h] as f64 / *g as f64).sum();
            HeadProfile {
                head_id: h,
                hit_rate: sum / n,
            }
        })
        .collect())
}

/// Pair traces with gold sets by query id.
pub fn align_golds(traces: &[AttentionTrace], golds: &[GoldSet]) -> Result<Vec<GoldSet>> {
    let by_id: HashMap<&str, &GoldSet> = golds.iter().map(|g| (g.query_id.as_str(), g)).collect();
    traces
        .iter()
        .map(|t| {
            by_id
                .get(t.query_id.as_str())
                .map(|g| (*g).clone())
                .ok_or_else(|| Error::Integrity(format!("no gold set for trace `{}`", t.query_id)))
        })
        .collect()
}

/// The `q` heads with the largest hit rates (ties by head id), ascending.
pub fn select_retrieval_heads(profiles: &[HeadProfile], q: usize) -> Result<Vec<usize>> {
    if q == 0 {
        return Err(Error::Config("Q must be at least 1".into()));
    }
    if q > profiles.len() {
        return Err(Error::Config(format!(
            "cannot select {q} heads out of {}",
            profiles.len()
        )));
    }
    let mut ranked: Vec<&HeadProfile> = profiles.iter().collect();
    ranked.sort_by(|a, b| b.hit_rate.total_cmp(&a.hit_rate).then(a.head_id.cmp(&b.head_id)));
    let mut heads: Vec<usize> = ranked[..q].iter().map(|p| p.head_id).collect();
    heads.sort_unstable();
    Ok(heads)
}

/// Positions kept by the union of the heads' Top-M sets, ascending.
pub fn rap_filter_positions(trace: &AttentionTrace, heads: &[usize], m: usize) -> Result<Vec<usize>> {
    if heads.is_empty() {
        return Err(Error::Config("at least one retrieval head is required".into()));
    }
    let mut keep = BTreeSet::new();
    for &h in heads {
        keep.extend(top_m_positions(trace, h, m)?);
    }
    Ok(keep.into_iter().collect())
}

/// Passage ids kept by the retrieval heads, in original context order.
pub fn rap_filter(trace: &AttentionTrace, heads: &[usize], m: usize) -> Result<Vec<String>> {
    Ok(rap_filter_positions(trace, heads, m)?
        .into_iter()
        .map(|i| trace.passage_ids[i].clone())
        .collect())
}

/// Filter an instance's context with the retrieval heads. Gold passages may
/// be dropped; they are listed in `missing_gold` of the result.
pub fn rap_pipeline(
    instance: &BenchmarkInstance,
    trace: &AttentionTrace,
    config: RapConfig,
    heads: &[usize],
) -> Result<BenchmarkInstance> {
    if trace.query_id != instance.query_id {
        return Err(Error::Integrity(format!(
            "trace `{}` does not belong to instance `{}`",
            trace.query_id, instance.query_id
        )));
    }
    let aligned = trace.passage_ids.len() == instance.context.len()
        && trace.passage_ids.iter().zip(&instance.context).all(|(a, p)| *a == p.id);
    if !aligned {
        return Err(Error::Integrity(format!(
            "trace passages are not aligned with the context of `{}`",
            instance.query_id
        )));
    }
    let keep = rap_filter_positions(trace, heads, config.m)?;
    let context: Vec<_> = keep.iter().map(|&i| instance.context[i].clone()).collect();
    let (gold_positions, missing_gold) = BenchmarkInstance::locate_gold(&instance.gold_ids, &context);
    Ok(BenchmarkInstance {
        context,
        gold_positions,
        missing_gold,
        ..instance.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(qid: &str, scores: Vec<Vec<f64>>) -> AttentionTrace {
        let n = scores[0].len();
        AttentionTrace::new(qid, (0..n).map(|i| format!("c{i}")).collect(), scores).unwrap()
    }

    fn gold(qid: &str, ids: &[&str]) -> GoldSet {
        GoldSet {
            query_id: qid.into(),
            gold_ids: ids.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn top_m_examples() {
        let t = trace("q", vec![vec![0.5, 0.3, 0.2], vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(top_m_positions(&t, 0, 2).unwrap(), vec![0, 1]);
        assert_eq!(top_m_positions(&t, 0, 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_m_positions(&t, 0, 10).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_m_passages(&t, 2, 1).unwrap(), BTreeSet::from(["c2".to_string()]));
        assert_eq!(top_m_positions(&t, 1, 2).unwrap(), vec![0, 1]);
        assert!(top_m_positions(&t, 3, 1).is_err());
    }

    #[test]
    fn hit_rate_examples() {
        // query 1 gold {c0, c1}, query 2 gold {c2, c3}
        let traces = vec![
            trace("a", vec![vec![0.4, 0.3, 0.2, 0.1], vec![0.4, 0.0, 0.3, 0.3], vec![0.0, 0.0, 0.5, 0.5]]),
            trace("b", vec![vec![0.1, 0.2, 0.3, 0.4], vec![0.0, 0.4, 0.3, 0.3], vec![0.5, 0.5, 0.0, 0.0]]),
        ];
        let golds = vec![gold("a", &["c0", "c1"]), gold("b", &["c2", "c3"])];
        let p = compute_hit_rates(&traces, &golds, 2).unwrap();
        assert_eq!(p[0].hit_rate, 1.0);
        assert_eq!(p[1].hit_rate, 0.5);
        assert_eq!(p[2].hit_rate, 0.0);
    }

    #[test]
    fn hit_rate_errors() {
        let t = vec![trace("a", vec![vec![1.0, 0.0]])];
        assert!(compute_hit_rates(&t, &[gold("b", &["c0"])], 1).is_err());
        assert!(compute_hit_rates(&t, &[gold("a", &[])], 1).is_err());
        assert!(compute_hit_rates(&[], &[], 1).is_err());
        let two = vec![trace("a", vec![vec![1.0, 0.0]]), trace("b", vec![vec![1.0, 0.0], vec![0.0, 1.0]])];
        assert!(compute_hit_rates(&two, &[gold("a", &["c0"]), gold("b", &["c0"])], 1).is_err());
    }

    #[test]
    fn head_selection_examples() {
        let prof = |rates: &[f64]| -> Vec<HeadProfile> {
            rates.iter().enumerate().map(|(h, &r)| HeadProfile { head_id: h, hit_rate: r }).collect()
        };
        assert_eq!(select_retrieval_heads(&prof(&[0.9, 0.1, 0.7]), 2).unwrap(), vec![0, 2]);
        assert_eq!(select_retrieval_heads(&prof(&[0.9, 0.1, 0.7]), 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_retrieval_heads(&prof(&[0.3; 4]), 1).unwrap(), vec![0]);
        assert!(select_retrieval_heads(&prof(&[0.3; 4]), 5).is_err());
    }

    #[test]
    fn filter_examples() {
        let same = trace("q", vec![vec![0.1, 0.9, 0.0], vec![0.1, 0.9, 0.0]]);
        assert_eq!(rap_filter(&same, &[0, 1], 1).unwrap(), vec!["c1"]);
        let disjoint = trace("q", vec![vec![0.0, 0.1, 0.9], vec![0.8, 0.1, 0.1]]);
        assert_eq!(rap_filter(&disjoint, &[0, 1], 1).unwrap(), vec!["c0", "c2"]);
        assert!(rap_filter(&disjoint, &[], 1).is_err());
    }

    #[test]
    fn token_matrices_use_elementwise_max() {
        let ids = vec!["x".to_string(), "y".to_string()];
        let t = AttentionTrace::from_token_matrices("q", ids, &[vec![vec![0.1, 0.5]], vec![vec![0.3, 0.2]]]).unwrap();
        assert_eq!(t.scores, vec![vec![0.3, 0.5]]);
    }

    #[test]
    fn invalid_scores_rejected() {
        let ids = vec!["x".to_string()];
        assert!(AttentionTrace::new("q", ids.clone(), vec![vec![-0.1]]).is_err());
        assert!(AttentionTrace::new("q", ids.clone(), vec![vec![f64::NAN]]).is_err());
        assert!(AttentionTrace::new("q", ids, vec![vec![0.1, 0.2]]).is_err());
    }

    #[test]
    fn presets() {
        let rta_nq = preset(ProbedStyle::Rta, Regime::Confounded, ProbeTask::Nq).unwrap();
        assert_eq!((rta_nq.q, rta_nq.m), (2, 1));
        let da_hp = preset(ProbedStyle::Da, Regime::Confounded, ProbeTask::HotpotQa).unwrap();
        assert_eq!((da_hp.q, da_hp.m), (8, 1));
        let rta_wow = preset(ProbedStyle::Rta, Regime::Confounded, ProbeTask::Wow).unwrap();
        assert_eq!((rta_wow.q, rta_wow.m), (4, 8));
        assert!(preset(ProbedStyle::Da, Regime::Loft, ProbeTask::Fever).is_none());
        assert_eq!("hotpotqa".parse::<ProbeTask>().unwrap(), ProbeTask::HotpotQa);
    }

    fn arb_trace() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
        (1usize..6, 1usize..12).prop_flat_map(|(h, c)| {
            (prop::collection::vec(prop::collection::vec(0u8..6, c), h), Just(c))
                .prop_map(|(rows, c)| (rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect(), c))
        })
    }

    proptest! {
        #[test]
        fn filter_monotone_and_bounded((scores, c) in arb_trace(), m in 1usize..5, scale in 0.01f64..100.0) {
            let t = trace("q", scores.clone());
            let h = t.num_heads();
            let all: Vec<usize> = (0..h).collect();
            let first: Vec<usize> = vec![0];
            let small = rap_filter_positions(&t, &first, m).unwrap();
            let big = rap_filter_positions(&t, &all, m).unwrap();
            prop_assert!(small.iter().all(|p| big.contains(p)));
            let wider = rap_filter_positions(&t, &all, m + 1).unwrap();
            prop_assert!(big.iter().all(|p| wider.contains(p)));
            prop_assert!(big.len() <= c.min(h * m));

            let scaled: Vec<Vec<f64>> = scores.iter().enumerate()
                .map(|(i, r)| r.iter().map(|v| if i == 0 { v * scale } else { *v }).collect()).collect();
            let ts = trace("q", scaled);
            prop_assert_eq!(top_m_positions(&t, 0, m).unwrap(), top_m_positions(&ts, 0, m).unwrap());
            prop_assert_eq!(big, rap_filter_positions(&ts, &all, m).unwrap());
        }
    }
}
