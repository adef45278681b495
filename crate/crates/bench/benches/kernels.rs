use criterion::{black_box, criterion_group, criterion_main, Criterion};
use eqtaa_bench::randn;
use eqtaa_core::metrics;
use eqtaa_core::nn::ops::{softmax_last, softmax_last_reference};
use eqtaa_core::nn::{multi_head_attention, ConvP3d, ParamStore};

fn softmax(c: &mut Criterion) {
    let x = randn(0, &[8, 256, 256]);
    c.bench_function("softmax fused 8x256x256", |b| b.iter(|| softmax_last(black_box(&x)).unwrap()));
    c.bench_function("softmax reference 8x256x256", |b| b.iter(|| softmax_last_reference(black_box(&x)).unwrap()));
}

fn attention(c: &mut Criterion) {
    let q = randn(1, &[16, 256, 32]);
    let k = randn(2, &[16, 256, 32]);
    let v = randn(3, &[16, 256, 32]);
    c.bench_function("attention 16x256 tokens, 2 heads", |b| {
        b.iter(|| multi_head_attention(&q, &k, &v, 2).unwrap())
    });
}

fn conv(c: &mut Criterion) {
    let store = ParamStore::new(0, candle_core::DType::F32);
    let conv = ConvP3d::new(&store.root(), 16, 16).unwrap();
    let x = randn(4, &[2, 22, 16, 16, 16]);
    c.bench_function("conv p3d 2x22x16x16x16", |b| b.iter(|| conv.forward(black_box(&x)).unwrap()));
}

fn metric_suite(c: &mut Criterion) {
    let scores: Vec<f64> = (0..5000).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
    let labels: Vec<bool> = (0..5000).map(|i| i % 3 == 0).collect();
    c.bench_function("average precision 5000 frames", |b| {
        b.iter(|| metrics::average_precision(black_box(&scores), &labels).unwrap())
    });
    c.bench_function("auc 5000 videos", |b| b.iter(|| metrics::auc(black_box(&scores), &labels).unwrap()));
}

criterion_group!(benches, softmax, attention, conv, metric_suite);
criterion_main!(benches);
