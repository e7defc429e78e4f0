use bigsql_bench::{shuffled_superset, table};
use bigsql_core::resultset::{column_precision, containment_indicator, CompareOptions};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn containment(c: &mut Criterion) {
    let mut group = c.benchmark_group("containment");
    for rows in [100, 10_000, 100_000] {
        let truth = table(rows);
        let generated = shuffled_superset(rows);
        group.bench_with_input(BenchmarkId::new("unordered", rows), &rows, |b, _| {
            b.iter(|| containment_indicator(black_box(&truth), black_box(&generated), &CompareOptions::default()))
        });
        let same = table(rows);
        let ordered = CompareOptions::default().ordered(true);
        group.bench_with_input(BenchmarkId::new("ordered", rows), &rows, |b, _| {
            b.iter(|| containment_indicator(black_box(&truth), black_box(&same), &ordered))
        });
    }
    group.finish();
}

fn precision(c: &mut Criterion) {
    let truth = table(10);
    let generated = shuffled_superset(10);
    c.bench_function("column_precision", |b| {
        b.iter(|| column_precision(black_box(&truth), black_box(&generated)))
    });
}

criterion_group!(benches, containment, precision);
criterion_main!(benches);
