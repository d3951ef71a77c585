use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use varblock_bench::{attention_fixture, centroid_fixture, TOKEN_BUDGET};
use varblock_core::engine::{
    estimate_scores, estimate_scores_naive, select_topk, select_topk_naive, sparse_attention,
    sparse_attention_gather,
};
use varblock_core::{QuantSpec, QuantizedCentroidStore};

const HEADS: usize = 32;
const CONTEXTS: [usize; 2] = [8192, 65536];

fn estimation(c: &mut Criterion) {
    let mut group = c.benchmark_group("estimate");
    group.sample_size(20);
    for n in CONTEXTS {
        let (store, q) = centroid_fixture(HEADS, n, 7);
        let qstore = QuantizedCentroidStore::quantize(&store, QuantSpec::INT4_ASYM).unwrap();
        group.bench_with_input(BenchmarkId::new("fp32-batched", n), &n, |b, _| {
            b.iter(|| estimate_scores(black_box(&q), &store).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("fp32-naive", n), &n, |b, _| {
            b.iter(|| estimate_scores_naive(black_box(&q), &store).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("int4-batched", n), &n, |b, _| {
            b.iter(|| estimate_scores(black_box(&q), &qstore).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("int4-naive", n), &n, |b, _| {
            b.iter(|| estimate_scores_naive(black_box(&q), &qstore).unwrap())
        });
    }
    group.finish();
}

fn topk(c: &mut Criterion) {
    let mut group = c.benchmark_group("topk");
    group.sample_size(20);
    for n in CONTEXTS {
        let (store, q) = centroid_fixture(HEADS, n, 11);
        let scores = estimate_scores(&q, &store).unwrap();
        let assignment = store.assignment();
        group.bench_with_input(BenchmarkId::new("batched", n), &n, |b, _| {
            b.iter(|| select_topk(black_box(&scores), assignment, TOKEN_BUDGET, true).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("naive", n), &n, |b, _| {
            b.iter(|| {
                select_topk_naive(black_box(&scores), assignment, TOKEN_BUDGET, true).unwrap()
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(20);
    for n in [8192, 32768] {
        let f = attention_fixture(8, n, 13);
        group.bench_with_input(BenchmarkId::new("strided", n), &n, |b, _| {
            b.iter(|| sparse_attention(black_box(&f.queries), &f.cache, &f.selection).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("gather", n), &n, |b, _| {
            b.iter(|| {
                sparse_attention_gather(black_box(&f.queries), &f.cache, &f.selection).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, estimation, topk, attention);
criterion_main!(benches);
