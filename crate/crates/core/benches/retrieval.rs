//! Sequential vs parallel corpus build and query scoring over a synthetic
//! corpus made by replicating the fixture procedures.

use std::path::Path;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use core_engine::embed::HashingEmbedder;
use core_engine::procedure::parse_procedure_bundle;
use core_engine::retrieval::{chunk_procedure, Chunk};
use core_engine::{Execution, IndexedCorpus};

const QUERY: &str = "Hi, I have a person that is not breathing. What was the fourth step of the ISS CPR procedure?";

fn synthetic_chunks(copies: usize) -> Vec<Chunk> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/procedures");
    let mut base = Vec::new();
    for entry in std::fs::read_dir(&root).unwrap() {
        let dir = entry.unwrap().path();
        let p = parse_procedure_bundle(&std::fs::read(dir.join("procedure.json")).unwrap(), &dir).unwrap();
        base.extend(chunk_procedure(&p));
    }
    (0..copies)
        .flat_map(|i| {
            base.iter().map(move |c| Chunk {
                chunk_id: format!("{}~{i}", c.chunk_id),
                procedure_id: format!("{}-{i}", c.procedure_id),
                step_number: c.step_number,
                text: format!("{} variant{}", c.text, i % 97),
            })
        })
        .collect()
}

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn bench_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("build");
    group.sample_size(10);
    for copies in [10, 100] {
        let chunks = synthetic_chunks(copies);
        for (name, exec) in modes() {
            group.bench_with_input(BenchmarkId::new(name, chunks.len()), &chunks, |b, chunks| {
                b.iter(|| {
                    IndexedCorpus::from_chunks(chunks.clone(), Arc::new(HashingEmbedder::default()), exec).unwrap()
                })
            });
        }
    }
    group.finish();
}

fn bench_query(c: &mut Criterion) {
    let mut group = c.benchmark_group("query");
    for copies in [10, 100] {
        let chunks = synthetic_chunks(copies);
        let n = chunks.len();
        let index =
            IndexedCorpus::from_chunks(chunks, Arc::new(HashingEmbedder::default()), Execution::default()).unwrap();
        for (name, exec) in modes() {
            group.bench_with_input(BenchmarkId::new(name, n), &index, |b, index| {
                b.iter(|| index.hybrid_retrieve_with(QUERY, 5, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_build, bench_query);
criterion_main!(benches);
