//! Passage collection, BM25 inverted index and IR metrics.
//!
//! The index is the retrieval tool the search environment calls. It is
//! immutable once built and can be shared across concurrent episodes.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::simple_tokens;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    Empty,
    #[error("duplicate passage id `{0}`")]
    DuplicateId(String),
    #[error("passage `{0}` has empty text")]
    EmptyText(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Passage {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// Text that gets indexed: title followed by body.
    fn indexed_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

/// Tokenization used by the retriever: lowercase, punctuation stripped, no
/// stemming and no stopword removal.
pub fn search_tokens(text: &str) -> Vec<String> {
    simple_tokens(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    /// Non-negative Lucene-style inverse document frequency.
    pub fn idf(&self, doc_count: usize, doc_freq: usize) -> f64 {
        let n = doc_count as f64;
        let df = doc_freq as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn term_weight(&self, tf: f64, doc_len: f64, avg_len: f64) -> f64 {
        let norm = 1.0 - self.b + self.b * doc_len / avg_len;
        tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posting {
    doc: u32,
    tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPassage {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub hits: Vec<ScoredPassage>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.id.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

/// Anything that can answer a `search` call from the environment.
pub trait Retriever {
    fn search(&self, query: &str, k: usize) -> RetrievalResult;
    fn passage(&self, id: &str) -> Option<&Passage>;
}

/// Inverted index with BM25 scoring.
#[derive(Debug, Clone)]
pub struct Index {
    params: Bm25Params,
    // sorted by id; doc numbers are positions in this vector
    passages: Vec<Passage>,
    by_id: BTreeMap<String, u32>,
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lens: Vec<u32>,
    avg_len: f64,
}

impl Index {
    pub fn build(corpus: impl IntoIterator<Item = Passage>) -> Result<Self, CorpusError> {
        Self::build_with(corpus, Bm25Params::default())
    }

    pub fn build_with(corpus: impl IntoIterator<Item = Passage>, params: Bm25Params) -> Result<Self, CorpusError> {
        let mut passages: Vec<Passage> = corpus.into_iter().collect();
        if passages.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut seen = HashSet::new();
        for p in &passages {
            if !seen.insert(p.id.as_str()) {
                return Err(CorpusError::DuplicateId(p.id.clone()));
            }
            if p.text.trim().is_empty() {
                return Err(CorpusError::EmptyText(p.id.clone()));
            }
        }
        passages.sort_by(|a, b| a.id.cmp(&b.id));

        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lens = Vec::with_capacity(passages.len());
        let mut by_id = BTreeMap::new();
        for (doc, p) in passages.iter().enumerate() {
            let doc = doc as u32;
            by_id.insert(p.id.clone(), doc);
            let tokens = search_tokens(&p.indexed_text());
            doc_lens.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting { doc, tf: count });
            }
        }
        let total: u64 = doc_lens.iter().map(|&l| u64::from(l)).sum();
        let avg_len = total as f64 / doc_lens.len() as f64;
        Ok(Self {
            params,
            passages,
            by_id,
            postings,
            doc_lens,
            avg_len,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.passages.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    /// Passages in ascending id order.
    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Score all passages sharing at least one term with `query`.
    fn score_all(&self, query: &str) -> BTreeMap<u32, f64> {
        let mut qtf: BTreeMap<String, u32> = BTreeMap::new();
        for t in search_tokens(query) {
            *qtf.entry(t).or_default() += 1;
        }
        let n = self.doc_count();
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for (term, q_count) in &qtf {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.params.idf(n, list.len());
            for posting in list {
                let w = self.params.term_weight(
                    f64::from(posting.tf),
                    f64::from(self.doc_lens[posting.doc as usize]),
                    self.avg_len,
                );
                *scores.entry(posting.doc).or_insert(0.0) += f64::from(*q_count) * idf * w;
            }
        }
        scores
    }
}

impl Retriever for Index {
    fn search(&self, query: &str, k: usize) -> RetrievalResult {
        let k = k.max(1);
        let mut ranked: Vec<(u32, f64)> = self.score_all(query).into_iter().collect();
        // doc numbers follow id order, so ascending doc breaks ties by id
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        RetrievalResult {
            query: query.to_owned(),
            hits: ranked
                .into_iter()
                .map(|(doc, score)| ScoredPassage {
                    id: self.passages[doc as usize].id.clone(),
                    score,
                })
                .collect(),
        }
    }

    fn passage(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&d| &self.passages[d as usize])
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Passage>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Passage = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Passage]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in corpus {
        serde_json::to_writer(&mut w, p).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Relevance judgments keyed by (conversation id, turn index).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels {
    map: BTreeMap<(String, usize), BTreeSet<String>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, conversation: &str, turn: usize, passage: &str) {
        self.map
            .entry((conversation.to_owned(), turn))
            .or_default()
            .insert(passage.to_owned());
    }

    pub fn relevant(&self, conversation: &str, turn: usize) -> Option<&BTreeSet<String>> {
        self.map.get(&(conversation.to_owned(), turn))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, usize), &BTreeSet<String>)> {
        self.map.iter()
    }

    /// Ids referenced by the judgments that the index does not contain.
    pub fn missing_from(&self, index: &Index) -> Vec<String> {
        let mut missing: BTreeSet<String> = BTreeSet::new();
        for ids in self.map.values() {
            for id in ids {
                if !index.contains(id) {
                    missing.insert(id.clone());
                }
            }
        }
        missing.into_iter().collect()
    }

    /// Tab-separated `conversation_id turn_index passage_id relevance`.
    /// Rows with relevance 0 are accepted and dropped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let reader = BufReader::new(File::open(path)?);
        let mut qrels = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: &str| CorpusError::Malformed {
                line: i + 1,
                message: message.to_owned(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(malformed("expected 4 tab-separated columns"));
            }
            let turn: usize = cols[1]
                .trim()
                .parse()
                .map_err(|_| malformed("turn_index is not a non-negative integer"))?;
            match cols[3].trim() {
                "1" => qrels.insert(cols[0].trim(), turn, cols[2].trim()),
                "0" => {}
                _ => return Err(malformed("relevance must be 0 or 1")),
            }
        }
        Ok(qrels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut w = BufWriter::new(File::create(path)?);
        for ((conv, turn), ids) in &self.map {
            for id in ids {
                writeln!(w, "{conv}\t{turn}\t{id}\t1")?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn dcg_discount(rank: usize) -> f64 {
    // rank is 1-based
    1.0 / ((rank + 1) as f64).log2()
}

/// Binary-gain nDCG@k.
pub fn ndcg_at<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if relevant.is_empty() || k == 0 {
        return 0.0;
    }
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| relevant.contains(id.as_ref()))
        .map(|(i, _)| dcg_discount(i + 1))
        .fold(0.0, |acc, x| acc + x);
    let ideal: f64 = (1..=k.min(relevant.len())).map(dcg_discount).sum();
    dcg / ideal
}

pub fn recall_at<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let found = ranking
        .iter()
        .take(k)
        .filter(|id| relevant.contains(id.as_ref()))
        .count();
    found as f64 / relevant.len() as f64
}

pub fn mrr<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>) -> f64 {
    ranking
        .iter()
        .position(|id| relevant.contains(id.as_ref()))
        .map_or(0.0, |pos| 1.0 / (pos + 1) as f64)
}

pub fn hit_at<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>, n: usize) -> u8 {
    u8::from(ranking.iter().take(n).any(|id| relevant.contains(id.as_ref())))
}
