//! Property tests for the invariants each module promises.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use proptest::prelude::*;

use common::reference_ranking;
use core_engine::embed::HashingEmbedder;
use core_engine::graph::{Edge, EdgeKind, KnowledgeGraph, Node, NodeKind};
use core_engine::procedure::{parse_procedure_bundle, render_step_text};
use core_engine::prompt::{assemble_user_prompt, split_enclosure};
use core_engine::reply::{topicality_gate, Segment};
use core_engine::retrieval::Chunk;
use core_engine::{parse_markers, verify_verbatim, Execution, IndexedCorpus, VerbatimStatus};

fn line() -> impl Strategy<Value = String> {
    "[A-Za-z0-9][A-Za-z0-9,.()→' -]{0,30}[A-Za-z0-9.)]".prop_filter("no delimiter", |s| !s.contains("'''"))
}

prop_compose! {
    fn bundle()(
        id in "[a-z][a-z0-9-]{0,12}",
        title in "[A-Z][a-z]{2,8}( [A-Z][a-z]{2,8}){0,2}",
        day in 1u32..=28, month in 1u32..=12, year in 1990u32..2030,
        figure_count in 0u32..3,
        steps in prop::collection::vec(("[A-Z]{2,8}( [A-Z]{2,8})?", prop::collection::vec(line(), 1..4), any::<u8>()), 1..7),
    ) -> serde_json::Value {
        let figures: Vec<_> = (1..=figure_count)
            .map(|n| serde_json::json!({"number": n, "caption": format!("Caption {n}"), "media": format!("figures/f{n}.png")}))
            .collect();
        let steps: Vec<_> = steps
            .into_iter()
            .enumerate()
            .map(|(i, (label, body, pick))| {
                let refs: Vec<u32> = if figure_count > 0 && pick % 2 == 0 { vec![u32::from(pick) % figure_count + 1] } else { vec![] };
                serde_json::json!({"number": i + 1, "label": label, "body": body, "figures": refs})
            })
            .collect();
        serde_json::json!({
            "id": id, "title": title, "last_updated": format!("{year:04}-{month:02}-{day:02}"),
            "figures": figures, "steps": steps,
        })
    }
}

const VOCAB: &[&str] = &[
    "oxygen",
    "mask",
    "valve",
    "hatch",
    "seal",
    "pressure",
    "crew",
    "alarm",
    "fire",
    "smoke",
    "cartridge",
    "pump",
    "water",
    "sample",
    "cuff",
    "belt",
    "treadmill",
    "ammonia",
    "goggle",
    "irrigate",
    "compress",
    "chest",
    "aed",
    "pulse",
    "monitor",
    "vent",
    "leak",
    "isolate",
    "scrubber",
    "power",
];

fn text_from(words: &[usize]) -> String {
    words.iter().map(|&w| VOCAB[w % VOCAB.len()]).collect::<Vec<_>>().join(" ")
}

prop_compose! {
    fn corpus()(docs in prop::collection::vec(prop::collection::vec(0usize..60, 1..25), 1..50)) -> Vec<Chunk> {
        docs.iter()
            .enumerate()
            .map(|(i, words)| Chunk {
                chunk_id: format!("c{i:02}"),
                procedure_id: format!("p{}", i / 5),
                step_number: Some(i as u32 % 5 + 1),
                text: text_from(words),
            })
            .collect()
    }
}

fn build(chunks: Vec<Chunk>, exec: Execution) -> IndexedCorpus {
    IndexedCorpus::from_chunks(chunks, Arc::new(HashingEmbedder::default()), exec).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn parse_is_deterministic_and_round_trips(b in bundle()) {
        let raw = serde_json::to_vec(&b).unwrap();
        let dir = Path::new(".");
        let p = parse_procedure_bundle(&raw, dir).unwrap();
        prop_assert_eq!(&p, &parse_procedure_bundle(&raw, dir).unwrap());
        let again = parse_procedure_bundle(p.to_bundle_json().as_bytes(), dir).unwrap();
        prop_assert_eq!(&p, &again);
        for s in &p.steps {
            let text = render_step_text(s);
            let mut rest = text.as_str();
            for l in &s.body_lines {
                let at = rest.find(l.as_str());
                prop_assert!(at.is_some(), "{:?} missing from {:?}", l, text);
                rest = &rest[at.unwrap() + l.len()..];
            }
        }
    }

    #[test]
    fn ranking_matches_reference(chunks in corpus(), query in prop::collection::vec(0usize..60, 0..6)) {
        let query = text_from(&query);
        let index = build(chunks.clone(), Execution::Sequential);
        let got = index.hybrid_retrieve(&query, chunks.len()).unwrap();
        let want = reference_ranking(&chunks, &query);
        prop_assert_eq!(got.len(), want.len());
        for (g, (id, score)) in got.iter().zip(&want) {
            prop_assert!((g.hybrid_score - score).abs() <= 1e-9, "{} {} vs {} {}", g.chunk.chunk_id, g.hybrid_score, id, score);
        }
        // Order must agree wherever the reference scores are distinguishable.
        for (i, (g, (id, _))) in got.iter().zip(&want).enumerate() {
            let tied = want.iter().filter(|(_, s)| (s - want[i].1).abs() <= 1e-9).count() > 1;
            if !tied {
                prop_assert_eq!(&g.chunk.chunk_id, id);
            }
        }
    }

    #[test]
    fn results_are_bounded_sorted_and_deterministic(chunks in corpus(), query in prop::collection::vec(0usize..60, 1..6), k in 1usize..10) {
        let query = text_from(&query);
        let seq = build(chunks.clone(), Execution::Sequential);
        let par = build(chunks, Execution::Parallel);
        prop_assert!(seq == par);
        let a = seq.hybrid_retrieve_with(&query, k, Execution::Sequential).unwrap();
        let b = par.hybrid_retrieve_with(&query, k, Execution::Parallel).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        prop_assert!(a.len() <= k);
        for w in a.windows(2) {
            prop_assert!(w[0].hybrid_score > w[1].hybrid_score
                || (w[0].hybrid_score == w[1].hybrid_score && w[0].chunk.chunk_id < w[1].chunk.chunk_id));
            prop_assert!(w[0].confidence >= w[1].confidence);
        }
        for r in &a {
            prop_assert!((0.0..=1.0).contains(&r.confidence));
            prop_assert_eq!(r.confidence, r.hybrid_score);
        }
        let gate = topicality_gate(&a, 0.35);
        prop_assert_eq!(gate.proceed, a[0].confidence >= 0.35);
    }

    #[test]
    fn index_json_round_trips(chunks in corpus()) {
        let index = build(chunks, Execution::Sequential);
        let back = IndexedCorpus::from_json(&index.to_json(), Arc::new(HashingEmbedder::default())).unwrap();
        prop_assert!(index == back);
        for i in 0..index.len() {
            let norm: f64 = index.vector(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn query_never_enters_the_enclosure(query in "\\PC{1,80}", extra in prop::collection::vec("'{1,5}|\n|x", 0..6)) {
        let query = format!("{query}{}", extra.concat());
        let procedure = "T\nStep 1 - A:\nbody";
        let b = assemble_user_prompt(&query, procedure, "Last update: 09 April 2015").unwrap();
        let delimiters = b.user.split('\n').filter(|l| *l == "'''").count();
        prop_assert_eq!(delimiters, 2);
        let (inside, tail) = split_enclosure(&b.user).unwrap();
        prop_assert_eq!(inside, format!("{procedure}\n\nLast update: 09 April 2015"));
        prop_assert!(!tail.contains("'''"));
        prop_assert_eq!(tail.replace('\'', ""), query.replace('\'', ""));
    }

    #[test]
    fn marker_parse_is_total_and_lossless(raw in prop::collection::vec(any::<u8>(), 0..200)) {
        let s = String::from_utf8_lossy(&raw).into_owned();
        let p = parse_markers(&s);
        prop_assert_eq!(p.to_source(), s);
    }

    #[test]
    fn marker_fields_follow_segments(parts in prop::collection::vec(prop_oneof![
        (1u32..2000).prop_map(|n| format!("<<STEP {n}>>")),
        (1u32..50).prop_map(|n| format!("<<SHOW FIGURE {n}>>")),
        "[a-z <>0-9]{0,8}",
        Just("<<STEP >>".to_string()),
        Just("<<STEP 0>>".to_string()),
        Just("<<STEP 1234567890>>".to_string()),
    ], 0..8)) {
        let s = parts.concat();
        let p = parse_markers(&s);
        let steps: Vec<u32> = p.segments.iter().filter_map(|x| match x { Segment::Step { number, .. } => Some(*number), _ => None }).collect();
        prop_assert_eq!(p.step_number, if steps.len() == 1 { Some(steps[0]) } else { None });
        let mut figs = Vec::new();
        for x in &p.segments {
            if let Segment::Figure { number, .. } = x {
                if !figs.contains(number) { figs.push(*number); }
            }
        }
        prop_assert_eq!(&p.figure_numbers, &figs);
        prop_assert_eq!(p.to_source(), s);
    }

    #[test]
    fn graph_is_append_consistent_and_persists(raw in prop::collection::vec("[A-Za-z0-9 ]{1,12}", 1..8), shuffle in any::<u64>()) {
        // Values with equal slugs name the same node; keep one of each.
        let mut values: Vec<String> = Vec::new();
        for v in raw {
            if !core_engine::graph::slug(&v).is_empty() && values.iter().all(|w| core_engine::graph::slug(w) != core_engine::graph::slug(&v)) {
                values.push(v);
            }
        }
        prop_assume!(!values.is_empty());
        let mut g = KnowledgeGraph::new();
        let root = g.add_node(Node::new(NodeKind::ProcedureDoc, [("procedure_id", "p")]).unwrap()).unwrap();
        let mut nodes = Vec::new();
        for v in &values {
            let id = g.add_node(Node::new(NodeKind::Keyword, [("keyword", v.as_str())]).unwrap()).unwrap();
            g.add_edge(Edge { from: root.clone(), to: id.clone(), kind: EdgeKind::HasKeyword }).unwrap();
            prop_assert!(g.neighbors(&root, None).unwrap().iter().any(|n| n.id == id));
            nodes.push(id);
        }
        let back = KnowledgeGraph::from_jsonl(&g.to_jsonl()).unwrap();
        prop_assert_eq!(&back, &g);

        // Same content inserted in another order renders the same block.
        let mut h = KnowledgeGraph::new();
        h.add_node(Node::new(NodeKind::ProcedureDoc, [("procedure_id", "p")]).unwrap()).unwrap();
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.rotate_left((shuffle as usize) % values.len());
        for &i in &order {
            h.add_node(Node::new(NodeKind::Keyword, [("keyword", values[i].as_str())]).unwrap()).unwrap();
        }
        for &i in order.iter().rev() {
            h.add_edge(Edge { from: root.clone(), to: nodes[i].clone(), kind: EdgeKind::HasKeyword }).unwrap();
        }
        prop_assert_eq!(&h, &g);
        prop_assert_eq!(h.linked_info_block("p").unwrap(), g.linked_info_block("p").unwrap());
    }
}

/// Every single-character substitution outside whitespace flips an oracle
/// reply from Pass to Fail.
#[test]
fn character_substitutions_flip_verbatim() {
    let p = common::load("iss-cpr");
    let mut checked = 0;
    for step in &p.steps {
        let text = render_step_text(step);
        let reply = format!("<<STEP {}>> - {text}", step.number);
        assert_eq!(verify_verbatim(&parse_markers(&reply), &p).status, VerbatimStatus::Pass);
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                continue;
            }
            let sub = if c == 'x' { 'y' } else { 'x' };
            let mutated = format!("<<STEP {}>> - {}{sub}{}", step.number, &text[..i], &text[i + c.len_utf8()..]);
            let report = verify_verbatim(&parse_markers(&mutated), &p);
            assert_eq!(report.status, VerbatimStatus::Fail, "step {} char {i}", step.number);
            checked += 1;
        }
    }
    assert!(checked > 500);
}

#[test]
fn bm25_statistics_match_counts() {
    let chunks = common::load_all().iter().flat_map(core_engine::retrieval::chunk_procedure).collect::<Vec<_>>();
    let index = build(chunks.clone(), Execution::Sequential);
    let mut df: BTreeMap<String, u32> = BTreeMap::new();
    for c in &chunks {
        let mut seen: Vec<String> = core_engine::text::tokenize(&c.text);
        seen.sort();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1;
        }
    }
    for (term, n) in &df {
        assert_eq!(index.doc_freq(term), *n, "{term}");
    }
}
