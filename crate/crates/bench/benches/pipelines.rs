//! Benchmarks for the hot paths: graph-node reconciliation, precedent
//! retrieval over a large store, robustness-metric aggregation, and the
//! full staged diagnosis pipeline against the mock gateways.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ddxgraph_core::graph::{merge_or_prune, DEFAULT_TAU};
use ddxgraph_core::memory::{Exemplar, ExemplarStore};
use ddxgraph_core::{
    compute_metrics, DiagnosisAgent, FixtureBundle, MemoryView, MockEmbedder, PairOutcome, UnitVec,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DIM: usize = 256;

fn random_unit(rng: &mut ChaCha8Rng) -> UnitVec {
    let raw: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    UnitVec::from_raw(raw).expect("nonzero vector")
}

fn bench_merge_or_prune(c: &mut Criterion) {
    let mut group = c.benchmark_group("merge_or_prune");
    for fanout in [8usize, 64, 512] {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let script = random_unit(&mut rng);
        let observations: Vec<UnitVec> = (0..fanout).map(|_| random_unit(&mut rng)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(fanout), &fanout, |b, _| {
            b.iter(|| {
                merge_or_prune(black_box(&script), black_box(&observations), DEFAULT_TAU)
                    .expect("valid tau")
            })
        });
    }
    group.finish();
}

fn bench_retrieval_10k(c: &mut Criterion) {
    let dir = tempfile::tempdir().expect("tempdir");
    let embedder = Arc::new(MockEmbedder::new(DIM, 7));
    let mut store =
        ExemplarStore::open(dir.path().join("exemplars.jsonl"), embedder).expect("open store");
    for i in 0..10_000u32 {
        store
            .store_exemplar(Exemplar {
                case_id: format!("case-{i:05}"),
                one_liner: format!(
                    "patient {i} with presentation variant {} and onset pattern {}",
                    i % 97,
                    i % 13
                ),
                narrative: String::new(),
                diagnosis: format!("diagnosis-{}", i % 113),
                lesson: "retrieval benchmark filler".into(),
                trace_ref: String::new(),
                rounds: 1,
            })
            .expect("store exemplar");
    }
    c.bench_function("retrieve_top5_of_10k", |b| {
        b.iter(|| {
            store
                .retrieve(black_box("sudden chest pain with breathlessness in a young adult"), 5)
                .expect("retrieval")
        })
    });
}

fn bench_compute_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let outcomes: Vec<PairOutcome> = (0..100_000)
        .map(|_| match rng.random_range(0..4u8) {
            0 => PairOutcome::Robust,
            1 => PairOutcome::Trapped,
            2 => PairOutcome::OtherTrapError,
            _ => PairOutcome::BaseFail,
        })
        .collect();
    c.bench_function("compute_metrics_100k", |b| {
        b.iter(|| compute_metrics(black_box(&outcomes)).expect("nonempty"))
    });
}

fn bench_diagnose_pipeline(c: &mut Criterion) {
    let narrative = include_str!("../../../fixtures/case_100473_control.txt");
    let agent = DiagnosisAgent::mock(Arc::new(FixtureBundle::builtin()), 42);
    let memory = MemoryView { illness_graphs: None, exemplars: None };
    c.bench_function("diagnose_staged_pipeline", |b| {
        b.iter(|| {
            agent
                .diagnose(black_box("bench-case"), black_box(narrative), memory, &[], 42)
                .expect("mock diagnosis")
        })
    });
}

criterion_group!(
    benches,
    bench_merge_or_prune,
    bench_retrieval_10k,
    bench_compute_metrics,
    bench_diagnose_pipeline
);
criterion_main!(benches);
