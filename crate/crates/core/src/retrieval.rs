//! Lexical retrieval used to mine confounding passages: an Okapi BM25
//! inverted index, external ranking ingestion, and multi-retriever pooling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, KnowledgeBase};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Depth used for passage-level retrievers.
pub const PASSAGE_RETRIEVER_DEPTH: usize = 200;
/// Depth used for document-level external rankings.
pub const DOCUMENT_RETRIEVER_DEPTH: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0) {
            return Err(Error::Config(format!("k1 must be positive, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!("b must lie in [0, 1], got {}", self.b)));
        }
        Ok(())
    }
}

/// Lowercased whitespace tokens with surrounding punctuation removed.
pub fn analyze(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub position: u32,
    pub tf: u32,
}

#[derive(Debug, Clone)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    passage_ids: Vec<String>,
}

impl InvertedIndex {
    pub fn build(kb: &KnowledgeBase) -> Result<Self> {
        if kb.is_empty() {
            return Err(Error::Config("cannot index an empty knowledge base".into()));
        }
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(kb.len());
        let mut passage_ids = Vec::with_capacity(kb.len());
        for (pos, passage) in kb.passages().iter().enumerate() {
            let terms = analyze(&passage.text);
            doc_lengths.push(terms.len() as u32);
            passage_ids.push(passage.id.clone());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for term in terms {
                *tf.entry(term).or_default() += 1;
            }
            // positions are visited in ascending order, so lists stay sorted
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    position: pos as u32,
                    tf: count,
                });
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        Ok(InvertedIndex {
            postings,
            doc_lengths,
            avg_doc_length,
            passage_ids,
        })
    }

    pub fn num_passages(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, position: usize) -> u32 {
        self.doc_lengths[position]
    }

    pub fn passage_id(&self, position: usize) -> &str {
        &self.passage_ids[position]
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn term_freq(&self, term: &str, position: usize) -> u32 {
        let list = self.postings(term);
        match list.binary_search_by_key(&(position as u32), |p| p.position) {
            Ok(i) => list[i].tf,
            Err(_) => 0,
        }
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`; never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_passages() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, position: usize, params: Bm25Params) -> f64 {
        if tf == 0 {
            return 0.0;
        }
        let tf = tf as f64;
        let norm = 1.0 - params.b + params.b * self.doc_lengths[position] as f64 / self.avg_doc_length;
        idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
    }

    /// BM25 score of one passage. Query terms are expected to be analyzed
    /// already (see [`analyze`]); repeated terms contribute once per occurrence.
    pub fn bm25_score(&self, query_terms: &[String], position: usize, params: Bm25Params) -> f64 {
        query_terms
            .iter()
            .map(|t| self.term_weight(self.idf(t), self.term_freq(t, position), position, params))
            .sum()
    }

    /// Top-`k` passages by BM25 score. Only passages sharing at least one
    /// query term are returned.
    pub fn retrieve_topk(&self, query_id: &str, query_text: &str, k: usize, params: Bm25Params) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        params.validate()?;
        let terms = analyze(query_text);
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            let idf = self.idf(term);
            for posting in self.postings(term) {
                let pos = posting.position as usize;
                *acc.entry(posting.position).or_default() += self.term_weight(idf, posting.tf, pos, params);
            }
        }
        let entries = acc
            .into_iter()
            .filter(|(_, score)| *score > 0.0)
            .map(|(pos, score)| RankedEntry {
                passage_id: self.passage_ids[pos as usize].clone(),
                score,
            })
            .collect();
        RankedList::new(query_id, "bm25", entries, k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub passage_id: String,
    pub score: f64,
}

/// One retriever's ranking for one query. Entries are ordered by score
/// descending, ties by passage id ascending, and hold at most `k` items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub retriever_name: String,
    entries: Vec<RankedEntry>,
    pub k: usize,
}

fn by_score_then_id(a: &RankedEntry, b: &RankedEntry) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.passage_id.cmp(&b.passage_id))
}

impl RankedList {
    /// Sorts, checks for duplicate ids, and truncates to depth `k`.
    pub fn new(
        query_id: impl Into<String>,
        retriever_name: impl Into<String>,
        mut entries: Vec<RankedEntry>,
        k: usize,
    ) -> Result<Self> {
        let query_id = query_id.into();
        let retriever_name = retriever_name.into();
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !e.score.is_finite() {
                return Err(Error::Integrity(format!(
                    "{retriever_name} ranking for `{query_id}` has a non-finite score for `{}`",
                    e.passage_id
                )));
            }
            if !seen.insert(e.passage_id.as_str()) {
                return Err(Error::Integrity(format!(
                    "{retriever_name} ranking for `{query_id}` lists `{}` twice",
                    e.passage_id
                )));
            }
        }
        entries.sort_by(by_score_then_id);
        entries.truncate(k);
        Ok(RankedList {
            query_id,
            retriever_name,
            entries,
            k,
        })
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.passage_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Deserialize)]
struct RankingRecord {
    query_id: String,
    retriever_name: String,
    passage_id: String,
    rank: usize,
    score: f64,
}

/// Load an external ranking file. Records are grouped per
/// `(query_id, retriever_name)`; groups come back sorted by that key.
pub fn ingest_external_rankings(path: &Path) -> Result<Vec<RankedList>> {
    let mut groups: BTreeMap<(String, String), Vec<RankedEntry>> = BTreeMap::new();
    read_jsonl(path, |r: RankingRecord, _| {
        if r.rank == 0 {
            return Err(Error::Integrity(format!("rank must be 1-based, got 0 for `{}`", r.passage_id)));
        }
        groups.entry((r.query_id, r.retriever_name)).or_default().push(RankedEntry {
            passage_id: r.passage_id,
            score: r.score,
        });
        Ok(())
    })?;
    groups
        .into_iter()
        .map(|((query_id, retriever), entries)| {
            let k = entries.len();
            RankedList::new(query_id, retriever, entries, k)
        })
        .collect()
}

/// Pool several rankings of the same query: walk the rank strata top to
/// bottom, visiting each stratum's entries in a seeded uniform order, and
/// emit ids on first occurrence until `budget` ids are out.
pub fn pool_rankings(lists: &[RankedList], budget: usize, seed: u64) -> Result<Vec<String>> {
    let Some(first) = lists.first() else {
        return Ok(Vec::new());
    };
    if let Some(other) = lists.iter().find(|l| l.query_id != first.query_id) {
        return Err(Error::Integrity(format!(
            "cannot pool rankings of different queries (`{}` and `{}`)",
            first.query_id, other.query_id
        )));
    }
    let mut rng = rng_for(seed, &["pool", &first.query_id]);
    let depth = lists.iter().map(RankedList::len).max().unwrap_or(0);
    let mut out = Vec::new();
    let mut emitted: HashSet<&str> = HashSet::new();
    for rank in 0..depth {
        if out.len() >= budget {
            break;
        }
        let mut stratum: Vec<&str> = lists
            .iter()
            .filter_map(|l| l.entries.get(rank))
            .map(|e| e.passage_id.as_str())
            .collect();
        stratum.shuffle(&mut rng);
        for id in stratum {
            if out.len() >= budget {
                break;
            }
            if emitted.insert(id) {
                out.push(id.to_string());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Passage, Tokenizer};
    use proptest::prelude::*;
    use std::io::Write;

    fn kb(texts: &[&str]) -> KnowledgeBase {
        KnowledgeBase::from_passages(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Passage::new(format!("p{}", i + 1), "T", *t, Tokenizer::Whitespace).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn list(qid: &str, name: &str, ids: &[&str]) -> RankedList {
        let entries = ids
            .iter()
            .enumerate()
            .map(|(i, id)| RankedEntry {
                passage_id: id.to_string(),
                score: (ids.len() - i) as f64,
            })
            .collect();
        RankedList::new(qid, name, entries, ids.len()).unwrap()
    }

    #[test]
    fn hand_computed_fixture() {
        let index = InvertedIndex::build(&kb(&["a b", "a a b", "c"])).unwrap();
        let p = Bm25Params::default();
        let q = vec!["a".to_string()];
        // N = 3, df(a) = 2, lengths 2, 3, 1, avg 2
        let idf = (1.5f64 / 2.5 + 1.0).ln();
        let s1 = idf * 1.0 * 2.2 / (1.0 + 1.2 * (0.25 + 0.75 * 2.0 / 2.0));
        let s2 = idf * 2.0 * 2.2 / (2.0 + 1.2 * (0.25 + 0.75 * 3.0 / 2.0));
        assert!((index.bm25_score(&q, 0, p) - s1).abs() < 1e-12);
        assert!((index.bm25_score(&q, 1, p) - s2).abs() < 1e-12);
        assert_eq!(index.bm25_score(&q, 2, p), 0.0);
        assert!(s2 > s1);
        let ranked = index.retrieve_topk("q", "a", 10, p).unwrap();
        assert_eq!(ranked.ids().collect::<Vec<_>>(), vec!["p2", "p1"]);
    }

    #[test]
    fn identical_passages_score_equally() {
        let index = InvertedIndex::build(&kb(&["x y", "x y", "x y"])).unwrap();
        let q = analyze("x");
        let scores: Vec<f64> = (0..3).map(|i| index.bm25_score(&q, i, Bm25Params::default())).collect();
        assert!(scores.iter().all(|&s| s == scores[0] && s > 0.0));
        let ranked = index.retrieve_topk("q", "x", 2, Bm25Params::default()).unwrap();
        assert_eq!(ranked.ids().collect::<Vec<_>>(), vec!["p1", "p2"]);
    }

    #[test]
    fn saturated_k_returns_all_positive() {
        let index = InvertedIndex::build(&kb(&["a", "b", "a c"])).unwrap();
        let ranked = index.retrieve_topk("q", "a", 100, Bm25Params::default()).unwrap();
        assert_eq!(ranked.len(), 2);
    }

    #[test]
    fn bad_params_and_empty_kb() {
        let index = InvertedIndex::build(&kb(&["a"])).unwrap();
        assert!(index.retrieve_topk("q", "a", 0, Bm25Params::default()).is_err());
        assert!(index.retrieve_topk("q", "a", 1, Bm25Params { k1: 0.0, b: 0.5 }).is_err());
        assert!(index.retrieve_topk("q", "a", 1, Bm25Params { k1: 1.0, b: 1.5 }).is_err());
        assert!(InvertedIndex::build(&KnowledgeBase::default()).is_err());
    }

    #[test]
    fn ranked_list_rejects_duplicates_and_sorts() {
        let entries = vec![
            RankedEntry { passage_id: "b".into(), score: 1.0 },
            RankedEntry { passage_id: "a".into(), score: 1.0 },
            RankedEntry { passage_id: "c".into(), score: 3.0 },
        ];
        let l = RankedList::new("q", "r", entries.clone(), 2).unwrap();
        assert_eq!(l.ids().collect::<Vec<_>>(), vec!["c", "a"]);
        let mut dup = entries;
        dup.push(RankedEntry { passage_id: "a".into(), score: 0.5 });
        assert!(RankedList::new("q", "r", dup, 5).is_err());
    }

    #[test]
    fn ingest_groups_and_resorts() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for (q, r, p, rank, s) in [("q1", "dpr", "x", 2, 0.5), ("q1", "dpr", "y", 1, 0.9), ("q1", "bm25", "x", 1, 7.0)] {
            writeln!(f, r#"{{"query_id":"{q}","retriever_name":"{r}","passage_id":"{p}","rank":{rank},"score":{s}}}"#).unwrap();
        }
        let lists = ingest_external_rankings(f.path()).unwrap();
        assert_eq!(lists.len(), 2);
        assert_eq!(lists[0].retriever_name, "bm25");
        assert_eq!(lists[1].ids().collect::<Vec<_>>(), vec!["y", "x"]);

        let mut dup = tempfile::NamedTempFile::new().unwrap();
        for _ in 0..2 {
            writeln!(dup, r#"{{"query_id":"q","retriever_name":"r","passage_id":"x","rank":1,"score":1}}"#).unwrap();
        }
        assert_eq!(ingest_external_rankings(dup.path()).unwrap_err().kind(), crate::ErrorKind::Integrity);
    }

    #[test]
    fn pooling_examples() {
        let one = list("q", "a", &["x", "y", "z"]);
        assert_eq!(pool_rankings(&[one.clone()], 2, 5).unwrap(), vec!["x", "y"]);
        assert_eq!(pool_rankings(&[one.clone(), one.clone()], 10, 5).unwrap(), vec!["x", "y", "z"]);

        let a = list("q", "a", &["a1", "a2"]);
        let b = list("q", "b", &["b1", "b2"]);
        for seed in 0..64 {
            let pooled = pool_rankings(&[a.clone(), b.clone()], 4, seed).unwrap();
            let first: HashSet<&str> = pooled[..2].iter().map(String::as_str).collect();
            assert_eq!(first, HashSet::from(["a1", "b1"]));
        }
        let other = list("other", "b", &["b1"]);
        assert!(pool_rankings(&[a, other], 4, 0).is_err());
    }

    #[test]
    fn pooling_shuffles_within_strata() {
        let lists: Vec<RankedList> = (0..4).map(|i| list("q", &format!("r{i}"), &[&format!("top{i}")])).collect();
        let firsts: HashSet<String> = (0..200).map(|s| pool_rankings(&lists, 1, s).unwrap()[0].clone()).collect();
        assert_eq!(firsts.len(), 4);
    }

    /// Exhaustive scorer over every passage, sorted by the same tie rule.
    fn brute_force_topk(index: &InvertedIndex, query: &str, k: usize) -> Vec<(String, f64)> {
        let terms = analyze(query);
        let mut all: Vec<(String, f64)> = (0..index.num_passages())
            .map(|i| (index.passage_id(i).to_string(), index.bm25_score(&terms, i, Bm25Params::default())))
            .filter(|(_, s)| *s > 0.0)
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    fn vocab_text(words: &[u8]) -> String {
        words.iter().map(|w| format!("t{}", w % 23)).collect::<Vec<_>>().join(" ")
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn topk_matches_exhaustive(
            docs in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..12), 1..60),
            query in prop::collection::vec(any::<u8>(), 1..5),
            k in 1usize..20,
        ) {
            let texts: Vec<String> = docs.iter().map(|d| vocab_text(d)).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let index = InvertedIndex::build(&kb(&refs)).unwrap();
            let q = vocab_text(&query);
            let got = index.retrieve_topk("q", &q, k, Bm25Params::default()).unwrap();
            let want = brute_force_topk(&index, &q, k);
            prop_assert_eq!(got.len(), want.len());
            for (e, (id, s)) in got.entries().iter().zip(&want) {
                prop_assert_eq!(&e.passage_id, id);
                prop_assert!((e.score - s).abs() < 1e-9);
            }
        }

        #[test]
        fn unrelated_passage_leaves_scores_alone(
            docs in prop::collection::vec(prop::collection::vec(0u8..10, 1..8), 2..20),
        ) {
            // query vocabulary t0..t4 never appears in the added passage
            let mut texts: Vec<String> = docs.iter().map(|d| d.iter().map(|w| format!("t{w}")).collect::<Vec<_>>().join(" ")).collect();
            let q = analyze("t0 t1 t2 t3 t4");
            let before = InvertedIndex::build(&kb(&texts.iter().map(String::as_str).collect::<Vec<_>>())).unwrap();
            texts.push("zzz yyy".to_string());
            let after_kb = kb(&texts.iter().map(String::as_str).collect::<Vec<_>>());
            let after = InvertedIndex::build(&after_kb).unwrap();
            for i in 0..before.num_passages() {
                let (s0, s1) = (before.bm25_score(&q, i, Bm25Params::default()), after.bm25_score(&q, i, Bm25Params::default()));
                // N and the average length shift; only zero scores are pinned
                prop_assert_eq!(s0 == 0.0, s1 == 0.0);
            }
        }

        #[test]
        fn pooling_invariants(
            sizes in prop::collection::vec(0usize..8, 1..5),
            budget in 0usize..30,
            seed in any::<u64>(),
        ) {
            let lists: Vec<RankedList> = sizes.iter().enumerate().map(|(r, &n)| {
                let ids: Vec<String> = (0..n).map(|i| format!("r{r}_{i}")).collect();
                let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
                list("q", &format!("ret{r}"), &refs)
            }).collect();
            let pooled = pool_rankings(&lists, budget, seed).unwrap();
            prop_assert!(pooled.len() <= budget);
            let unique: HashSet<&String> = pooled.iter().collect();
            prop_assert_eq!(unique.len(), pooled.len());
            for l in &lists {
                let order: Vec<&str> = pooled.iter().map(String::as_str).filter(|id| l.ids().any(|x| x == *id)).collect();
                let expected: Vec<&str> = l.ids().take(order.len()).collect();
                prop_assert_eq!(order, expected);
            }
            prop_assert_eq!(pool_rankings(&lists, budget, seed).unwrap(), pooled);
        }
    }
}
