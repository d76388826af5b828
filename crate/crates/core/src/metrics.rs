//! Exact match, retrieval recall, ROUGE and per-task aggregation.

use std::collections::BTreeSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::TaskKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub prediction: String,
    pub references: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_ids: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_ids: Option<BTreeSet<String>>,
}

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, references: &[String]) -> u8 {
    let p = normalize_answer(prediction);
    u8::from(references.iter().any(|r| normalize_answer(r) == p))
}

/// Map free text onto the TRUE/FALSE verdict vocabulary: the first token
/// (after normalization) that names a verdict wins. Text without one is
/// returned unchanged.
pub fn map_verdict(text: &str) -> String {
    for token in normalize_answer(text).split_whitespace() {
        match token {
            "true" | "supports" | "supported" => return "TRUE".into(),
            "false" | "refutes" | "refuted" => return "FALSE".into(),
            _ => {}
        }
    }
    text.to_string()
}

pub fn recall_rate(retrieved: &BTreeSet<String>, gold: &BTreeSet<String>) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Config("recall is undefined for an empty gold set".into()));
    }
    Ok(retrieved.intersection(gold).count() as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    const ZERO: RougeScore = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    fn from_overlap(overlap: usize, pred_len: usize, ref_len: usize) -> Self {
        if overlap == 0 || pred_len == 0 || ref_len == 0 {
            return Self::ZERO;
        }
        let precision = overlap as f64 / pred_len as f64;
        let recall = overlap as f64 / ref_len as f64;
        RougeScore {
            precision,
            recall,
            f1: 2.0 * precision * recall / (precision + recall),
        }
    }
}

fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(prediction: &str, reference: &str) -> RougeScore {
    let p = rouge_tokens(prediction);
    let r = rouge_tokens(reference);
    RougeScore::from_overlap(lcs_length(&p, &r), p.len(), r.len())
}

/// Clipped n-gram overlap ROUGE-N.
pub fn rouge_n(prediction: &str, reference: &str, n: usize) -> RougeScore {
    use std::collections::HashMap;
    let grams = |toks: &[String]| -> HashMap<Vec<String>, usize> {
        let mut m = HashMap::new();
        if n > 0 {
            for w in toks.windows(n) {
                *m.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        m
    };
    let p = rouge_tokens(prediction);
    let r = rouge_tokens(reference);
    let (gp, gr) = (grams(&p), grams(&r));
    let overlap = gp.iter().map(|(g, c)| (*c).min(gr.get(g).copied().unwrap_or(0))).sum();
    RougeScore::from_overlap(overlap, gp.values().sum(), gr.values().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RougeVariant {
    #[default]
    #[serde(rename = "rouge-l")]
    L,
    #[serde(rename = "rouge-1")]
    One,
    #[serde(rename = "rouge-2")]
    Two,
}

impl RougeVariant {
    pub fn name(self) -> &'static str {
        match self {
            RougeVariant::L => "rouge-l",
            RougeVariant::One => "rouge-1",
            RougeVariant::Two => "rouge-2",
        }
    }

    pub fn score(self, prediction: &str, reference: &str) -> RougeScore {
        match self {
            RougeVariant::L => rouge_l(prediction, reference),
            RougeVariant::One => rouge_n(prediction, reference, 1),
            RougeVariant::Two => rouge_n(prediction, reference, 2),
        }
    }
}

impl FromStr for RougeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rouge-l" | "l" => Ok(RougeVariant::L),
            "rouge-1" | "1" => Ok(RougeVariant::One),
            "rouge-2" | "2" => Ok(RougeVariant::Two),
            other => Err(Error::Config(format!("unknown ROUGE variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task_kind: TaskKind,
    pub metric: String,
    pub num_records: usize,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
}

/// Per-record task metric: EM for QA, EM after verdict mapping for fact
/// verification, best ROUGE F1 over references for dialogue.
pub fn score_record(record: &EvalRecord, task: TaskKind, rouge: RougeVariant) -> Result<f64> {
    if record.references.is_empty() {
        return Err(Error::Integrity(format!("record `{}` has no references", record.query_id)));
    }
    Ok(match task {
        TaskKind::Qa => f64::from(exact_match(&record.prediction, &record.references)),
        TaskKind::FactVerification => {
            let refs: Vec<String> = record.references.iter().map(|r| map_verdict(r)).collect();
            f64::from(exact_match(&map_verdict(&record.prediction), &refs))
        }
        TaskKind::DialogueCompletion => record
            .references
            .iter()
            .map(|r| rouge.score(&record.prediction, r).f1)
            .fold(0.0, f64::max),
    })
}

pub fn aggregate(records: &[EvalRecord], task: TaskKind, rouge: RougeVariant) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Config("no records to aggregate".into()));
    }
    let mut total = 0.0;
    let mut recall_sum = 0.0;
    let mut recall_count = 0usize;
    for r in records {
        total += score_record(r, task, rouge)?;
        if let (Some(retrieved), Some(gold)) = (&r.retrieved_ids, &r.gold_ids) {
            recall_sum += recall_rate(retrieved, gold)?;
            recall_count += 1;
        }
    }
    let metric = match task {
        TaskKind::DialogueCompletion => rouge.name(),
        _ => "exact_match",
    };
    Ok(Report {
        task_kind: task,
        metric: metric.into(),
        num_records: records.len(),
        score: total / records.len() as f64,
        recall: (recall_count > 0).then(|| recall_sum / recall_count as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn refs(r: &[&str]) -> Vec<String> {
        r.iter().map(|s| s.to_string()).collect()
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn em_examples() {
        assert_eq!(exact_match("Humboldt County", &refs(&["Humboldt County"])), 1);
        assert_eq!(exact_match("the Humboldt county.", &refs(&["Humboldt County"])), 1);
        assert_eq!(exact_match("Humboldt", &refs(&["Humboldt County"])), 0);
        assert_eq!(exact_match("x", &refs(&["y", "X!"])), 1);
        assert_eq!(exact_match("x", &[]), 0);
    }

    #[test]
    fn verdict_mapping() {
        assert_eq!(map_verdict("Judgement: True."), "TRUE");
        assert_eq!(map_verdict("that is FALSE, not true"), "FALSE");
        assert_eq!(map_verdict("SUPPORTS"), "TRUE");
        assert_eq!(map_verdict("unsure"), "unsure");
        let r = EvalRecord {
            query_id: "f".into(),
            prediction: "The claim is true".into(),
            references: refs(&["TRUE"]),
            retrieved_ids: None,
            gold_ids: None,
        };
        assert_eq!(score_record(&r, TaskKind::FactVerification, RougeVariant::L).unwrap(), 1.0);
        assert_eq!(score_record(&r, TaskKind::Qa, RougeVariant::L).unwrap(), 0.0);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_rate(&set(&["a", "b", "c"]), &set(&["a", "b"])).unwrap(), 1.0);
        assert_eq!(recall_rate(&set(&["c"]), &set(&["a", "b"])).unwrap(), 0.0);
        assert_eq!(recall_rate(&set(&["a", "c"]), &set(&["a", "b"])).unwrap(), 0.5);
        assert!(matches!(recall_rate(&set(&["a"]), &set(&[])), Err(Error::Config(_))));
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c", "A b C").f1, 1.0);
        assert_eq!(rouge_l("a b", "c d").f1, 0.0);
        assert_eq!(rouge_l("", "c d").f1, 0.0);
        let s = rouge_l("a b c d", "a c e");
        assert!((s.precision - 0.5).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 4.0 / 7.0).abs() < 1e-15);
        assert!((rouge_n("a a b", "a b b", 1).f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_n("a b c", "a b d", 2).precision, 0.5);
    }

    #[test]
    fn aggregate_reports() {
        let rec = |p: &str, r: &str, retrieved: &[&str]| EvalRecord {
            query_id: p.into(),
            prediction: p.into(),
            references: refs(&[r]),
            retrieved_ids: Some(set(retrieved)),
            gold_ids: Some(set(&["g1", "g2"])),
        };
        let records = vec![rec("a", "a", &["g1", "g2"]), rec("b", "c", &["g1"])];
        let report = aggregate(&records, TaskKind::Qa, RougeVariant::L).unwrap();
        assert_eq!(report.score, 0.5);
        assert_eq!(report.recall, Some(0.75));
        assert_eq!(report.metric, "exact_match");
        let dialogue = aggregate(&records, TaskKind::DialogueCompletion, RougeVariant::L).unwrap();
        assert_eq!(dialogue.metric, "rouge-l");
        assert!(aggregate(&[], TaskKind::Qa, RougeVariant::L).is_err());
    }

    proptest! {
        #[test]
        fn em_symmetric(x in "[A-Za-z .,!]{0,12}", y in "[A-Za-z .,!]{0,12}") {
            prop_assert_eq!(exact_match(&x, &[y.clone()]), exact_match(&y, &[x]));
        }

        #[test]
        fn recall_bounded_and_monotone(
            gold in prop::collection::btree_set("[a-f]", 1..5),
            retrieved in prop::collection::btree_set("[a-h]", 0..6),
            extra in "[a-h]",
        ) {
            let r = recall_rate(&retrieved, &gold).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            let mut grown = retrieved.clone();
            grown.insert(extra);
            prop_assert!(recall_rate(&grown, &gold).unwrap() >= r);
        }
    }
}
