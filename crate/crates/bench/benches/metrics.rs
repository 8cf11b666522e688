use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ofp_bench::{random_binary, random_flow, random_occupancy, square_grid};
use ofp_core::metrics::{epe, pr_auc, soft_iou, ThresholdGrid, DEFAULT_THRESHOLDS};
use ofp_core::IouVariant;

fn bench_pr_auc(c: &mut Criterion) {
    let mut group = c.benchmark_group("pr_auc");
    let spec = square_grid(256);
    let pred = random_occupancy(spec, 1);
    let gt = random_binary(spec, 0.05, 2);
    for count in [11, DEFAULT_THRESHOLDS, 1000] {
        let taus = ThresholdGrid::new(count).unwrap();
        group.bench_with_input(BenchmarkId::new("256x256", count), &taus, |b, taus| {
            b.iter(|| pr_auc(black_box(&pred), black_box(&gt), taus).unwrap())
        });
    }
    group.finish();
}

fn bench_dense_metrics(c: &mut Criterion) {
    let spec = square_grid(256);
    let pred = random_occupancy(spec, 3);
    let gt = random_binary(spec, 0.05, 4);
    let flow_pred = random_flow(spec, 10.0, 5);
    let flow_gt = random_flow(spec, 10.0, 6);
    c.bench_function("soft_iou/256", |b| {
        b.iter(|| soft_iou(black_box(&pred), black_box(&gt), IouVariant::PaperLiteral).unwrap())
    });
    c.bench_function("epe/256", |b| {
        b.iter(|| epe(black_box(&flow_pred), black_box(&flow_gt)).unwrap())
    });
}

criterion_group!(benches, bench_pr_auc, bench_dense_metrics);
criterion_main!(benches);
