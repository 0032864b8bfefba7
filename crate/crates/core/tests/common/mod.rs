//! Shared fixtures and reference implementations for integration tests.
//!
//! The reference scorer recomputes hybrid retrieval from first principles
//! (term counting over raw chunk text, dense vectors built by hand) so the
//! index can be checked against something that shares none of its code
//! beyond the stopword predicate.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use core_engine::llm::ChatBackend;
use core_engine::procedure::{parse_procedure_bundle, Procedure};
use core_engine::retrieval::Chunk;
use core_engine::text::is_stopword;
use core_engine::Engine;

pub const CPR_QUESTION: &str =
    "Hi, I have a person that is not breathing. I have already requested PMC. What was the fourth step of the ISS CPR procedure?";
pub const METADATA_QUESTION: &str = "When was the procedure last updated?";
pub const METADATA_REPLY: &str = "The CPR procedure on the ISS was last updated on 09 April 2015.";
pub const CPR_STEP_FOUR: &str = "<<STEP 4>> - DEPLOY AED:\nConnect AED electrodes to patient's chest. (See Figure 1)\nAED ON (green) → Press\nFollow verbal prompts.\nIf verbal prompts inaudible, read prompts on screen.\nContinue with \"Step 5\" <<SHOW FIGURE 1>>";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn bundle_path(id: &str) -> PathBuf {
    fixtures().join("procedures").join(id).join("procedure.json")
}

pub fn procedure_ids() -> Vec<String> {
    let mut ids: Vec<String> = std::fs::read_dir(fixtures().join("procedures"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    ids
}

pub fn load(id: &str) -> Procedure {
    let path = bundle_path(id);
    parse_procedure_bundle(&std::fs::read(&path).unwrap(), path.parent().unwrap()).unwrap()
}

pub fn load_all() -> Vec<Procedure> {
    procedure_ids().iter().map(|id| load(id)).collect()
}

pub fn engine_with(backend: Arc<dyn ChatBackend>, ids: &[&str]) -> Engine {
    let engine = Engine::in_memory(backend).unwrap();
    for id in ids {
        engine.ingest(&bundle_path(id)).unwrap();
    }
    engine
}

pub fn engine_with_all(backend: Arc<dyn ChatBackend>) -> Engine {
    let engine = Engine::in_memory(backend).unwrap();
    for id in procedure_ids() {
        engine.ingest(&bundle_path(&id)).unwrap();
    }
    engine
}

fn ref_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().chain(std::iter::once(' ')) {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            let t = std::mem::take(&mut cur);
            if !is_stopword(&t) {
                out.push(t);
            }
        }
    }
    out
}

fn ref_fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn ref_embed(text: &str, dim: u64) -> Vec<f64> {
    let mut v = vec![0.0; dim as usize];
    let tokens = ref_tokens(text);
    for t in &tokens {
        let h = ref_fnv(t.as_bytes());
        v[(h % dim) as usize] += if (h / dim).is_multiple_of(2) { 1.0 } else { -1.0 };
    }
    if v.iter().all(|&x| x == 0.0) {
        for t in &tokens {
            v[(ref_fnv(t.as_bytes()) % dim) as usize] += 1.0;
        }
    }
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Hybrid score of every chunk, ranked like the index ranks them.
pub fn reference_ranking(chunks: &[Chunk], query: &str) -> Vec<(String, f64)> {
    let docs: Vec<Vec<String>> = chunks.iter().map(|c| ref_tokens(&c.text)).collect();
    let n = docs.len() as f64;
    let avg = docs.iter().map(|d| d.len() as f64).sum::<f64>() / n;
    let terms: BTreeSet<String> = ref_tokens(query).into_iter().collect();

    let lexical: Vec<f64> = docs
        .iter()
        .map(|doc| {
            let mut tf: BTreeMap<&str, f64> = BTreeMap::new();
            for t in doc {
                *tf.entry(t).or_default() += 1.0;
            }
            terms
                .iter()
                .map(|t| {
                    let f = tf.get(t.as_str()).copied().unwrap_or(0.0);
                    if f == 0.0 {
                        return 0.0;
                    }
                    let df = docs.iter().filter(|d| d.contains(t)).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    idf * f * 2.2 / (f + 1.2 * (0.25 + 0.75 * doc.len() as f64 / avg))
                })
                .sum()
        })
        .collect();
    let max_lex = lexical.iter().cloned().fold(0.0, f64::max);

    let q = ref_embed(query, 256);
    let mut ranked: Vec<(String, f64)> = chunks
        .iter()
        .zip(&lexical)
        .map(|(c, &lex)| {
            let d = ref_embed(&c.text, 256);
            let cos: f64 = q.iter().zip(&d).map(|(a, b)| a * b).sum();
            let lex_part = if max_lex > 0.0 { lex / max_lex } else { 0.0 };
            (c.chunk_id.clone(), (0.5 * lex_part + 0.5 * cos.max(0.0)).clamp(0.0, 1.0))
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}
