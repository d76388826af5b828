//! Passages, knowledge bases, query records and token counting.
//!
//! Corpus and query files are line-delimited JSON. Documents can be loaded
//! either as ready-made passages or chunked on load into fixed-size windows
//! of whitespace tokens.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CHUNK_TOKENS: usize = 128;
pub const DEFAULT_CHUNK_OVERLAP: usize = 0;

/// Registered token counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// Number of whitespace-delimited words.
    #[default]
    Whitespace,
    /// `ceil(utf8_bytes / 4)`, a rough subword-count stand-in.
    BytesPer4,
}

impl Tokenizer {
    pub fn count_tokens(self, text: &str) -> usize {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().count(),
            Tokenizer::BytesPer4 => text.len().div_ceil(4),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tokenizer::Whitespace => "whitespace",
            Tokenizer::BytesPer4 => "bytes_per_4",
        }
    }
}

impl FromStr for Tokenizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" => Ok(Tokenizer::Whitespace),
            "bytes_per_4" | "bytes-per-4" => Ok(Tokenizer::BytesPer4),
            other => Err(Error::Config(format!("unknown tokenizer spec `{other}`"))),
        }
    }
}

impl fmt::Display for Tokenizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Convenience wrapper resolving a tokenizer by name.
pub fn count_tokens(text: &str, tokenizer: &str) -> Result<usize> {
    Ok(tokenizer.parse::<Tokenizer>()?.count_tokens(text))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
    pub token_count: usize,
}

impl Passage {
    pub fn new(
        id: impl Into<String>,
        title: impl Into<String>,
        text: impl Into<String>,
        tokenizer: Tokenizer,
    ) -> Result<Self> {
        let id = id.into();
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Integrity(format!("passage `{id}` has empty text")));
        }
        Ok(Passage {
            token_count: tokenizer.count_tokens(&text),
            title: title.into(),
            id,
            text,
        })
    }

    /// Passages sharing a title come from the same source document.
    pub fn source_document(&self) -> &str {
        &self.title
    }
}

/// Split a document into windows of at most `max_tokens` whitespace tokens,
/// consecutive windows sharing `overlap_tokens` tokens. Chunk ids are
/// `"{title}#{index}"`.
pub fn chunk_document(
    doc_title: &str,
    doc_text: &str,
    max_tokens: usize,
    overlap_tokens: usize,
    tokenizer: Tokenizer,
) -> Result<Vec<Passage>> {
    if max_tokens == 0 {
        return Err(Error::Config("max_tokens must be at least 1".into()));
    }
    if overlap_tokens >= max_tokens {
        return Err(Error::Config(format!(
            "overlap_tokens ({overlap_tokens}) must be smaller than max_tokens ({max_tokens})"
        )));
    }
    let words: Vec<&str> = doc_text.split_whitespace().collect();
    let stride = max_tokens - overlap_tokens;
    let mut passages = Vec::new();
    let mut start = 0;
    while start < words.len() {
        let end = (start + max_tokens).min(words.len());
        let id = format!("{doc_title}#{}", passages.len());
        passages.push(Passage::new(id, doc_title, words[start..end].join(" "), tokenizer)?);
        if end == words.len() {
            break;
        }
        start += stride;
    }
    Ok(passages)
}

/// An ordered, id-indexed passage collection.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    passages: Vec<Passage>,
    id_index: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self> {
        let mut id_index = HashMap::with_capacity(passages.len());
        for (pos, passage) in passages.iter().enumerate() {
            if id_index.insert(passage.id.clone(), pos).is_some() {
                return Err(Error::Integrity(format!("duplicate passage id `{}`", passage.id)));
            }
        }
        Ok(KnowledgeBase { passages, id_index })
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.position(id).map(|pos| &self.passages[pos])
    }

    pub fn require(&self, id: &str) -> Result<&Passage> {
        self.get(id)
            .ok_or_else(|| Error::Integrity(format!("unknown passage id `{id}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    Qa,
    FactVerification,
    DialogueCompletion,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Qa => "QA",
            TaskKind::FactVerification => "FACT_VERIFICATION",
            TaskKind::DialogueCompletion => "DIALOGUE_COMPLETION",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "QA" => Ok(TaskKind::Qa),
            "FACT_VERIFICATION" | "FEVER" => Ok(TaskKind::FactVerification),
            "DIALOGUE_COMPLETION" | "WOW" => Ok(TaskKind::DialogueCompletion),
            _ => Err(Error::Config(format!("unknown task kind `{s}`"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A query with its reference answer and gold provenance passage ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryInstance {
    pub query_id: String,
    pub q: String,
    pub a: String,
    pub gold_ids: BTreeSet<String>,
    pub task_kind: TaskKind,
}

impl QueryInstance {
    pub fn validate_against(&self, kb: &KnowledgeBase) -> Result<()> {
        if self.gold_ids.is_empty() {
            return Err(Error::Integrity(format!(
                "query `{}` has no gold passages",
                self.query_id
            )));
        }
        for id in &self.gold_ids {
            if kb.get(id).is_none() {
                return Err(Error::Integrity(format!(
                    "query `{}` references unknown gold passage `{id}`",
                    self.query_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// Each record is one passage, used as-is.
    Passages,
    /// Each record is a whole document, chunked on load.
    Documents { max_tokens: usize, overlap_tokens: usize },
}

#[derive(Deserialize)]
struct CorpusRecord {
    id: String,
    title: String,
    text: String,
}

/// Read a line-delimited JSON file, calling `on_record` with each parsed
/// record and its 1-based line number. Blank lines are skipped.
pub fn read_jsonl<T, F>(path: &Path, mut on_record: F) -> Result<()>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(T, usize) -> Result<()>,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        on_record(record, line_no).map_err(|e| match e {
            Error::Integrity(message) => Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message,
            },
            other => other,
        })?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path, format: CorpusFormat, tokenizer: Tokenizer) -> Result<KnowledgeBase> {
    let mut passages = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    read_jsonl(path, |record: CorpusRecord, line| {
        let produced = match format {
            CorpusFormat::Passages => vec![Passage::new(record.id, record.title, record.text, tokenizer)?],
            CorpusFormat::Documents {
                max_tokens,
                overlap_tokens,
            } => chunk_document(&record.title, &record.text, max_tokens, overlap_tokens, tokenizer)?,
        };
        for passage in produced {
            if let Some(first) = seen.insert(passage.id.clone(), line) {
                return Err(Error::Integrity(format!(
                    "duplicate passage id `{}` (first seen on line {first})",
                    passage.id
                )));
            }
            passages.push(passage);
        }
        Ok(())
    })?;
    KnowledgeBase::from_passages(passages)
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryInstance>> {
    let mut queries = Vec::new();
    read_jsonl(path, |query: QueryInstance, _| {
        if query.gold_ids.is_empty() {
            return Err(Error::Integrity(format!(
                "query `{}` has no gold passages",
                query.query_id
            )));
        }
        queries.push(query);
        Ok(())
    })?;
    Ok(queries)
}
