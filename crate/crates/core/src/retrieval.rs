//! Hybrid sparse + dense retrieval over raw messages, fused with
//! reciprocal rank fusion, used to pick exploration starting points.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ExecutionGraph, GraphError, VarRef};
use crate::recorder::fnv1a64;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
pub const RRF_K: u32 = 60;
pub const DEFAULT_EMBED_DIM: usize = 256;
pub const RAW_MESSAGE: &str = "raw_message";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RetrievalError {
    #[error("top_n must be at least 1")]
    InvalidTopN,
    #[error("duplicate document id {0}")]
    DuplicateDocument(VarRef),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("embedding provider failed: {0}")]
    Provider(String),
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone)]
pub struct Corpus {
    docs: Vec<(VarRef, String)>,
    tokens: Vec<Vec<String>>,
    doc_freq: HashMap<String, usize>,
    avg_len: f64,
}

impl Corpus {
    pub fn new(docs: Vec<(VarRef, String)>) -> Result<Self, RetrievalError> {
        let mut ids = HashSet::new();
        for (id, _) in &docs {
            if !ids.insert(id.clone()) {
                return Err(RetrievalError::DuplicateDocument(id.clone()));
            }
        }
        let tokens: Vec<Vec<String>> = docs.iter().map(|(_, t)| tokenize(t)).collect();
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for doc in &tokens {
            let unique: HashSet<&String> = doc.iter().collect();
            for t in unique {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
        }
        let avg_len = if tokens.is_empty() {
            0.0
        } else {
            tokens.iter().map(Vec::len).sum::<usize>() as f64 / tokens.len() as f64
        };
        Ok(Self {
            docs,
            tokens,
            doc_freq,
            avg_len,
        })
    }

    /// Latest version of every `raw_message` variable, in insertion order.
    pub fn raw_messages(graph: &ExecutionGraph) -> Self {
        let docs = graph
            .variables_in_category(RAW_MESSAGE)
            .filter_map(|c| {
                c.latest()
                    .map(|v| (VarRef::new(c.var_id.clone(), v.version), v.value.clone()))
            })
            .collect();
        Self::new(docs).expect("variable ids are unique")
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[(VarRef, String)] {
        &self.docs
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Okapi BM25 score of document `i` for the (deduplicated) query terms.
    pub fn bm25(&self, i: usize, query_terms: &BTreeSet<String>) -> f64 {
        let doc = &self.tokens[i];
        let len_norm = if self.avg_len > 0.0 {
            doc.len() as f64 / self.avg_len
        } else {
            0.0
        };
        query_terms
            .iter()
            .map(|term| {
                let tf = doc.iter().filter(|t| *t == term).count() as f64;
                if tf == 0.0 {
                    return 0.0;
                }
                let denom = tf + BM25_K1 * (1.0 - BM25_B + BM25_B * len_norm);
                self.idf(term) * tf * (BM25_K1 + 1.0) / denom
            })
            .sum()
    }
}

/// Documents ordered best-first. Scores non-increasing, ties by doc id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<(VarRef, f64)>,
}

impl RankedList {
    /// Sorts, drops non-positive scores and keeps the best `top_n`.
    pub fn from_scores(mut scored: Vec<(VarRef, f64)>, top_n: usize) -> Self {
        scored.retain(|(_, s)| *s > 0.0);
        scored.sort_by(|a, b| match b.1.total_cmp(&a.1) {
            Ordering::Equal => a.0.cmp(&b.0),
            o => o,
        });
        scored.truncate(top_n);
        Self { entries: scored }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<VarRef> {
        self.entries.iter().map(|(id, _)| id.clone()).collect()
    }
}

pub fn bm25_rank(corpus: &Corpus, query: &str, top_n: usize) -> Result<RankedList, RetrievalError> {
    if top_n == 0 {
        return Err(RetrievalError::InvalidTopN);
    }
    let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
    let scored = (0..corpus.len())
        .map(|i| (corpus.docs[i].0.clone(), corpus.bm25(i, &terms)))
        .collect();
    Ok(RankedList::from_scores(scored, top_n))
}

/// Text embedder used for dense retrieval. Implementations must be
/// deterministic per input text.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Bag-of-words feature hashing: term counts bucketed by FNV-1a modulo
/// `dim`, then L2-normalized. Empty token sets map to the zero vector.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let mut v = vec![0.0; self.dim];
        for term in tokenize(text) {
            v[(fnv1a64(term.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Embedding service reached over HTTP: `POST {"texts": [...]}` answered
/// by `{"vectors": [[...], ...]}`.
pub struct HttpEmbeddingProvider {
    url: String,
    dim: usize,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

impl HttpEmbeddingProvider {
    pub fn new(url: impl Into<String>, dim: usize) -> Result<Self, RetrievalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| RetrievalError::Provider(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            dim,
            client,
        })
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let mut v = self.embed_batch(&[text])?;
        v.pop()
            .ok_or_else(|| RetrievalError::Provider("empty vectors array".into()))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let resp: EmbedResponse = self
            .client
            .post(&self.url)
            .json(&EmbedRequest { texts })
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| RetrievalError::Provider(e.to_string()))?;
        if resp.vectors.len() != texts.len() {
            return Err(RetrievalError::Provider(format!(
                "expected {} vectors, got {}",
                texts.len(),
                resp.vectors.len()
            )));
        }
        if let Some(bad) = resp.vectors.iter().find(|v| v.len() != self.dim) {
            return Err(RetrievalError::Provider(format!(
                "expected dimension {}, got {}",
                self.dim,
                bad.len()
            )));
        }
        Ok(resp.vectors)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn dense_rank(
    corpus: &Corpus,
    query: &str,
    provider: &dyn EmbeddingProvider,
    top_n: usize,
) -> Result<RankedList, RetrievalError> {
    if top_n == 0 {
        return Err(RetrievalError::InvalidTopN);
    }
    if corpus.is_empty() {
        return Ok(RankedList::default());
    }
    let q = provider.embed(query)?;
    let texts: Vec<&str> = corpus.docs.iter().map(|(_, t)| t.as_str()).collect();
    let vectors = provider.embed_batch(&texts)?;
    let scored = corpus
        .docs
        .iter()
        .zip(&vectors)
        .map(|((id, _), v)| (id.clone(), cosine(&q, v)))
        .collect();
    Ok(RankedList::from_scores(scored, top_n))
}

/// Unweighted reciprocal rank fusion with 1-based ranks.
pub fn rrf_fuse(lists: &[RankedList], k: u32, top_n: usize) -> RankedList {
    let mut scores: HashMap<VarRef, f64> = HashMap::new();
    for list in lists {
        for (rank0, (id, _)) in list.entries.iter().enumerate() {
            *scores.entry(id.clone()).or_default() += 1.0 / (f64::from(k) + rank0 as f64 + 1.0);
        }
    }
    RankedList::from_scores(scores.into_iter().collect(), top_n)
}

/// Starting points for exploration: the best `⌊n/2⌋` raw messages for the
/// question + golden answer query, followed by the question itself.
pub fn seed_exploration(
    graph: &ExecutionGraph,
    question: &VarRef,
    golden_answer: &str,
    n: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<VarRef>, RetrievalError> {
    let question_text = &graph.version(question)?.value;
    let query = format!("{question_text} {golden_answer}");
    let corpus = Corpus::raw_messages(graph);
    let mut seeds = Vec::new();
    if !corpus.is_empty() && n >= 2 {
        let sparse = bm25_rank(&corpus, &query, n)?;
        let dense = dense_rank(&corpus, &query, provider, n)?;
        seeds = rrf_fuse(&[sparse, dense], RRF_K, n / 2).ids();
    }
    seeds.push(question.clone());
    Ok(seeds)
}

/// `|top-k seeds ∩ golden| / |golden|`; an empty golden set scores 1.
pub fn recall_at_k(seeds: &[VarRef], golden: &[VarRef], k: usize) -> f64 {
    let golden: HashSet<&VarRef> = golden.iter().collect();
    if golden.is_empty() {
        return 1.0;
    }
    let hits: HashSet<&VarRef> = seeds.iter().take(k).filter(|s| golden.contains(s)).collect();
    hits.len() as f64 / golden.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(id: &str) -> VarRef {
        VarRef::new(id, 0)
    }

    fn fixture() -> Corpus {
        Corpus::new(vec![
            (d("d1"), "red car".into()),
            (d("d2"), "blue boat".into()),
            (d("d3"), "red boat".into()),
        ])
        .unwrap()
    }

    #[test]
    fn tokenizer_rules() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Dave's car-show!"), ["dave", "s", "car", "show"]);
        assert_eq!(tokenize("Top-10 memory units"), ["top", "10", "memory", "units"]);
    }

    #[test]
    fn bm25_no_overlap_is_empty() {
        assert!(bm25_rank(&fixture(), "green plane", 5).unwrap().is_empty());
        assert!(bm25_rank(&Corpus::new(vec![]).unwrap(), "red", 5).unwrap().is_empty());
        assert!(matches!(
            bm25_rank(&fixture(), "red", 0),
            Err(RetrievalError::InvalidTopN)
        ));
    }

    #[test]
    fn bm25_top1() {
        let top = bm25_rank(&fixture(), "red car", 1).unwrap();
        assert_eq!(top.ids(), vec![d("d1")]);
    }

    #[test]
    fn dense_identical_text_scores_one() {
        let r = dense_rank(&fixture(), "blue boat", &HashingEmbedder::default(), 3).unwrap();
        assert_eq!(r.entries[0].0, d("d2"));
        assert!((r.entries[0].1 - 1.0).abs() < 1e-12);
        assert!(dense_rank(&fixture(), "", &HashingEmbedder::default(), 3)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn dense_hashed_fixture() {
        // red/car/blue/boat hash to distinct buckets (28, 193, 77, 123), so
        // cos(d1) = 1 and cos(d3) = 1/2.
        let r = dense_rank(&fixture(), "red car", &HashingEmbedder::default(), 3).unwrap();
        assert_eq!(r.ids(), vec![d("d1"), d("d3")]);
        assert!((r.entries[1].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn embedder_is_unit_norm_or_zero() {
        let e = HashingEmbedder::default();
        let v = e.embed("some words here").unwrap();
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(e.embed("!!!").unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn rrf_single_list_and_preference() {
        let a = RankedList {
            entries: vec![(d("d"), 9.0), (d("e"), 5.0)],
        };
        let b = RankedList {
            entries: vec![(d("x"), 3.0), (d("e"), 2.0)],
        };
        let single = rrf_fuse(std::slice::from_ref(&a), 60, 10);
        assert_eq!(single.ids(), vec![d("d"), d("e")]);
        assert_eq!(single.entries[0].1, 1.0 / 61.0);
        assert_eq!(single.entries[1].1, 1.0 / 62.0);
        let fused = rrf_fuse(&[a, b], 60, 10);
        // e: 1/62 + 1/62 beats d: 1/61 alone
        assert_eq!(fused.entries[0].0, d("e"));
    }

    #[test]
    fn recall_cases() {
        let seeds = vec![d("a"), d("b"), d("c")];
        assert_eq!(recall_at_k(&seeds, &[d("a"), d("c")], 8), 1.0);
        assert_eq!(recall_at_k(&seeds, &[d("z")], 8), 0.0);
        assert_eq!(recall_at_k(&seeds, &[d("b"), d("z")], 8), 0.5);
        assert_eq!(recall_at_k(&seeds, &[d("c")], 2), 0.0);
    }
}
