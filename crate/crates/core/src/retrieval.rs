//! Chunking, lexical/vector indexing and hybrid retrieval.
//!
//! Every procedure becomes one header chunk plus one chunk per step. A query
//! is scored against every chunk with BM25 and with the cosine of the
//! embedding vectors; the two are fused per query as
//!
//! ```text
//! hybrid = 0.5 * bm25 / max(bm25 over all chunks) + 0.5 * max(cosine, 0)
//! ```
//!
//! and the fused value doubles as the confidence shown next to each result.
//! Scoring is independent per chunk, so it runs data-parallel when the
//! `parallel` feature is enabled.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, Embedder, HashingEmbedder};
use crate::graph::write_atomic;
use crate::procedure::{render_step_text, Procedure};
use crate::text::tokenize;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
pub const LEXICAL_WEIGHT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("chunk {0} has no indexable tokens")]
    EmptyChunk(String),
    #[error("duplicate chunk id {0}")]
    DuplicateChunk(String),
    #[error("index was built with embedder {found}, expected {expected}")]
    EmbedderMismatch { expected: String, found: String },
    #[error("index file invalid: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How per-chunk loops are executed. `Parallel` falls back to sequential
/// when the crate is built without the `parallel` feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(usize, &T) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
            _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub procedure_id: String,
    pub step_number: Option<u32>,
    pub text: String,
}

/// One header chunk (title, last-updated line, step labels) followed by one
/// chunk per step holding the step's canonical text.
pub fn chunk_procedure(p: &Procedure) -> Vec<Chunk> {
    let mut header = format!("{}\nLast updated {}", p.title, p.display_date());
    for s in &p.steps {
        header.push('\n');
        header.push_str(&s.label);
    }
    let mut chunks = vec![Chunk {
        chunk_id: format!("{}#header", p.id),
        procedure_id: p.id.clone(),
        step_number: None,
        text: header,
    }];
    chunks.extend(p.steps.iter().map(|s| Chunk {
        chunk_id: format!("{}#step-{}", p.id, s.number),
        procedure_id: p.id.clone(),
        step_number: Some(s.number),
        text: render_step_text(s),
    }));
    chunks
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalResult {
    pub chunk: Chunk,
    pub lexical_score: f64,
    pub vector_score: f64,
    pub hybrid_score: f64,
    pub confidence: f64,
}

#[derive(Clone, Serialize, Deserialize)]
struct CorpusData {
    embedder: String,
    dimension: usize,
    chunks: Vec<Chunk>,
    doc_freq: BTreeMap<String, u32>,
    term_freqs: Vec<BTreeMap<String, u32>>,
    lengths: Vec<u32>,
    avg_len: f64,
    vectors: Vec<Vec<f64>>,
}

/// Immutable index over a set of procedures.
#[derive(Clone)]
pub struct IndexedCorpus {
    data: CorpusData,
    embedder: Arc<dyn Embedder>,
}

impl std::fmt::Debug for IndexedCorpus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IndexedCorpus")
            .field("embedder", &self.data.embedder)
            .field("chunks", &self.data.chunks.len())
            .finish()
    }
}

impl PartialEq for IndexedCorpus {
    fn eq(&self, other: &Self) -> bool {
        let (a, b) = (&self.data, &other.data);
        a.embedder == b.embedder
            && a.chunks == b.chunks
            && a.doc_freq == b.doc_freq
            && a.term_freqs == b.term_freqs
            && a.lengths == b.lengths
            && a.avg_len == b.avg_len
            && a.vectors == b.vectors
    }
}

impl IndexedCorpus {
    pub fn build(procedures: &[Procedure]) -> Result<Self, RetrievalError> {
        Self::build_with(procedures, Arc::new(HashingEmbedder::default()), Execution::default())
    }

    pub fn build_with(
        procedures: &[Procedure],
        embedder: Arc<dyn Embedder>,
        exec: Execution,
    ) -> Result<Self, RetrievalError> {
        let mut ordered: Vec<&Procedure> = procedures.iter().collect();
        ordered.sort_by(|a, b| a.id.cmp(&b.id));
        let chunks: Vec<Chunk> = ordered.into_iter().flat_map(chunk_procedure).collect();
        Self::from_chunks(chunks, embedder, exec)
    }

    pub fn from_chunks(
        chunks: Vec<Chunk>,
        embedder: Arc<dyn Embedder>,
        exec: Execution,
    ) -> Result<Self, RetrievalError> {
        let mut seen = BTreeSet::new();
        for c in &chunks {
            if !seen.insert(&c.chunk_id) {
                return Err(RetrievalError::DuplicateChunk(c.chunk_id.clone()));
            }
        }

        let analyzed = exec.map(&chunks, |_, c| {
            let tokens = tokenize(&c.text);
            let mut tf = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_insert(0u32) += 1;
            }
            let vector = embedder.embed(&c.text).ok();
            (tf, tokens.len() as u32, vector)
        });

        let mut term_freqs = Vec::with_capacity(chunks.len());
        let mut lengths = Vec::with_capacity(chunks.len());
        let mut vectors = Vec::with_capacity(chunks.len());
        let mut doc_freq: BTreeMap<String, u32> = BTreeMap::new();
        for (c, (tf, len, vector)) in chunks.iter().zip(analyzed) {
            let vector = match vector {
                Some(v) if len > 0 => v,
                _ => return Err(RetrievalError::EmptyChunk(c.chunk_id.clone())),
            };
            for term in tf.keys() {
                *doc_freq.entry(term.clone()).or_insert(0) += 1;
            }
            term_freqs.push(tf);
            lengths.push(len);
            vectors.push(vector);
        }
        let avg_len = if chunks.is_empty() {
            0.0
        } else {
            lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / chunks.len() as f64
        };

        Ok(IndexedCorpus {
            data: CorpusData {
                embedder: embedder.name().to_string(),
                dimension: embedder.dimension(),
                chunks,
                doc_freq,
                term_freqs,
                lengths,
                avg_len,
                vectors,
            },
            embedder,
        })
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.data.chunks
    }

    pub fn len(&self) -> usize {
        self.data.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.chunks.is_empty()
    }

    pub fn doc_freq(&self, term: &str) -> u32 {
        self.data.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn avg_len(&self) -> f64 {
        self.data.avg_len
    }

    pub fn chunk_len(&self, index: usize) -> u32 {
        self.data.lengths[index]
    }

    pub fn term_freq(&self, index: usize, term: &str) -> u32 {
        self.data.term_freqs[index].get(term).copied().unwrap_or(0)
    }

    pub fn vector(&self, index: usize) -> &[f64] {
        &self.data.vectors[index]
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn position(&self, chunk_id: &str) -> Option<usize> {
        self.data.chunks.iter().position(|c| c.chunk_id == chunk_id)
    }

    /// BM25 of `query` against one chunk. Each distinct query term counts once.
    pub fn lexical_score(&self, query: &str, chunk_id: &str) -> Option<f64> {
        let terms = distinct_terms(query);
        self.position(chunk_id).map(|i| self.bm25(&terms, i))
    }

    fn bm25(&self, terms: &[String], index: usize) -> f64 {
        let n = self.data.chunks.len() as f64;
        let len_norm = 1.0 - BM25_B + BM25_B * f64::from(self.data.lengths[index]) / self.data.avg_len;
        terms
            .iter()
            .map(|t| {
                let tf = f64::from(self.term_freq(index, t));
                if tf == 0.0 {
                    return 0.0;
                }
                let df = f64::from(self.doc_freq(t));
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * len_norm)
            })
            .sum()
    }

    /// Ranked top-`k` results for `query`.
    pub fn hybrid_retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievalResult>, RetrievalError> {
        self.hybrid_retrieve_with(query, k, Execution::default())
    }

    pub fn hybrid_retrieve_with(
        &self,
        query: &str,
        k: usize,
        exec: Execution,
    ) -> Result<Vec<RetrievalResult>, RetrievalError> {
        if self.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let terms = distinct_terms(query);
        // A query made only of stopwords has no direction; it scores zero.
        let qv = self.embedder.embed(query).ok();

        let raw: Vec<(f64, f64)> = exec.map(&self.data.vectors, |i, v| {
            let lexical = self.bm25(&terms, i);
            let vector = qv.as_deref().map_or(0.0, |q| cosine(q, v));
            (lexical, vector)
        });
        let max_lexical = raw.iter().map(|r| r.0).fold(0.0_f64, f64::max);

        let mut scored: Vec<(usize, f64)> =
            raw.iter().enumerate().map(|(i, &(lexical, vector))| (i, fuse(lexical, max_lexical, vector))).collect();
        let by_rank = |a: &(usize, f64), b: &(usize, f64)| {
            b.1.total_cmp(&a.1).then_with(|| self.data.chunks[a.0].chunk_id.cmp(&self.data.chunks[b.0].chunk_id))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        Ok(scored
            .into_iter()
            .map(|(i, hybrid)| RetrievalResult {
                chunk: self.data.chunks[i].clone(),
                lexical_score: raw[i].0,
                vector_score: raw[i].1,
                hybrid_score: hybrid,
                confidence: hybrid,
            })
            .collect())
    }

    /// True when this index was built from exactly these procedures.
    pub fn is_consistent_with(&self, procedures: &[Procedure]) -> bool {
        let mut ordered: Vec<&Procedure> = procedures.iter().collect();
        ordered.sort_by(|a, b| a.id.cmp(&b.id));
        let expected: Vec<Chunk> = ordered.into_iter().flat_map(chunk_procedure).collect();
        expected == self.data.chunks
            && self.data.embedder == self.embedder.name()
            && self.data.vectors.iter().all(|v| v.len() == self.data.dimension)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.data).expect("corpus serializes")
    }

    pub fn from_json(text: &str, embedder: Arc<dyn Embedder>) -> Result<Self, RetrievalError> {
        let data: CorpusData = serde_json::from_str(text).map_err(|e| RetrievalError::Corrupt(e.to_string()))?;
        if data.embedder != embedder.name() {
            return Err(RetrievalError::EmbedderMismatch {
                expected: embedder.name().to_string(),
                found: data.embedder,
            });
        }
        let n = data.chunks.len();
        if data.term_freqs.len() != n || data.lengths.len() != n || data.vectors.len() != n {
            return Err(RetrievalError::Corrupt("per-chunk arrays disagree in length".into()));
        }
        Ok(IndexedCorpus { data, embedder })
    }

    /// Writes `index.json` atomically. The file is a cache: it can always be
    /// rebuilt from the procedure bundles.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        write_atomic(path, self.to_json().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, embedder: Arc<dyn Embedder>) -> Result<Self, RetrievalError> {
        Self::from_json(&std::fs::read_to_string(path)?, embedder)
    }
}

fn distinct_terms(query: &str) -> Vec<String> {
    let set: BTreeSet<String> = tokenize(query).into_iter().collect();
    set.into_iter().collect()
}

fn fuse(lexical: f64, max_lexical: f64, vector: f64) -> f64 {
    let lex = if max_lexical > 0.0 { lexical / max_lexical } else { 0.0 };
    let hybrid = LEXICAL_WEIGHT * lex + (1.0 - LEXICAL_WEIGHT) * vector.max(0.0);
    hybrid.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procedure::parse_procedure_bundle;

    fn cpr() -> Procedure {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/procedures/iss-cpr");
        parse_procedure_bundle(&std::fs::read(dir.join("procedure.json")).unwrap(), &dir).unwrap()
    }

    fn chunk(id: &str, text: &str) -> Chunk {
        Chunk { chunk_id: id.into(), procedure_id: "p".into(), step_number: None, text: text.into() }
    }

    fn corpus(chunks: Vec<Chunk>) -> IndexedCorpus {
        IndexedCorpus::from_chunks(chunks, Arc::new(HashingEmbedder::default()), Execution::Sequential).unwrap()
    }

    #[test]
    fn chunking_policy() {
        let p = cpr();
        let chunks = chunk_procedure(&p);
        assert_eq!(chunks.len(), p.steps.len() + 1);
        assert_eq!(chunks[0].step_number, None);
        assert!(chunks[0].text.starts_with("ISS CPR\nLast updated 09 April 2015\n"));
        assert!(chunks[4].text.contains("Connect AED electrodes to patient's chest."));
        assert_eq!(chunks[4].chunk_id, "iss-cpr#step-4");
        assert_eq!(chunk_procedure(&p), chunks);
    }

    #[test]
    fn absent_term_scores_zero() {
        let c = corpus(vec![chunk("a", "oxygen mask"), chunk("b", "fire alarm")]);
        assert_eq!(c.lexical_score("treadmill", "a"), Some(0.0));
        assert_eq!(c.lexical_score("oxygen", "b"), Some(0.0));
    }

    #[test]
    fn single_chunk_bm25_by_hand() {
        // N = 1, df = 1, tf = 1, |D| = avgdl = 3:
        // idf = ln(1 + (1 - 1 + 0.5) / (1 + 0.5)) = ln(4/3)
        // tf part = 1 * 2.2 / (1 + 1.2 * 1) = 1
        let c = corpus(vec![chunk("only", "defibrillator pads cable")]);
        let expected = (4.0_f64 / 3.0).ln() * 2.2 / 2.2;
        let got = c.lexical_score("defibrillator", "only").unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn doc_freq_ignores_lengths() {
        let short = corpus(vec![chunk("a", "valve"), chunk("b", "pump")]);
        let long = corpus(vec![chunk("a", "valve"), chunk("b", "pump pump pump pump")]);
        assert_eq!(short.doc_freq("valve"), long.doc_freq("valve"));
    }

    #[test]
    fn k_larger_than_corpus_returns_everything_sorted() {
        let c = corpus(vec![chunk("a", "oxygen mask"), chunk("b", "fire alarm"), chunk("c", "oxygen flow")]);
        let r = c.hybrid_retrieve("oxygen", 10).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.windows(2).all(|w| w[0].hybrid_score >= w[1].hybrid_score));
        assert!(r.iter().all(|x| (0.0..=1.0).contains(&x.confidence)));
    }

    #[test]
    fn ties_break_by_chunk_id() {
        let c = corpus(vec![chunk("b", "same words"), chunk("a", "same words")]);
        let r = c.hybrid_retrieve("same", 2).unwrap();
        assert_eq!(r[0].hybrid_score, r[1].hybrid_score);
        assert_eq!(r[0].chunk.chunk_id, "a");
    }

    #[test]
    fn empty_corpus_and_zero_k() {
        let c = corpus(vec![]);
        assert!(matches!(c.hybrid_retrieve("x", 1), Err(RetrievalError::EmptyCorpus)));
        let c = corpus(vec![chunk("a", "x")]);
        assert!(matches!(c.hybrid_retrieve("x", 0), Err(RetrievalError::ZeroK)));
    }

    #[test]
    fn stopword_only_query_scores_zero() {
        let c = corpus(vec![chunk("a", "oxygen mask")]);
        let r = c.hybrid_retrieve("what is it", 1).unwrap();
        assert_eq!(r[0].confidence, 0.0);
    }

    #[test]
    fn stopword_only_chunk_is_rejected() {
        let err = IndexedCorpus::from_chunks(
            vec![chunk("a", "the of and")],
            Arc::new(HashingEmbedder::default()),
            Execution::Sequential,
        );
        assert!(matches!(err, Err(RetrievalError::EmptyChunk(_))));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let c = IndexedCorpus::build(&[cpr()]).unwrap();
        let back = IndexedCorpus::from_json(&c.to_json(), Arc::new(HashingEmbedder::default())).unwrap();
        assert_eq!(back, c);
        assert!(back.is_consistent_with(&[cpr()]));
        let other = IndexedCorpus::from_json(&c.to_json(), Arc::new(HashingEmbedder::new(64)));
        assert!(matches!(other, Err(RetrievalError::EmbedderMismatch { .. })));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let c = IndexedCorpus::build(&[cpr()]).unwrap();
        let s = c.hybrid_retrieve_with("deploy aed electrodes", 7, Execution::Sequential).unwrap();
        let p = c.hybrid_retrieve_with("deploy aed electrodes", 7, Execution::Parallel).unwrap();
        let key = |r: &[RetrievalResult]| {
            r.iter().map(|x| (x.chunk.chunk_id.clone(), x.hybrid_score.to_bits())).collect::<Vec<_>>()
        };
        assert_eq!(key(&s), key(&p));
    }
}
