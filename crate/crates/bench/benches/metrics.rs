use bigsql_bench::{records, sql_pairs};
use bigsql_core::metrics::{aggregate, canonicalize_sql};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn aggregation(c: &mut Criterion) {
    let mut group = c.benchmark_group("aggregate");
    for n in [1_000, 50_000] {
        let rs = records(n);
        let pairs = sql_pairs(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| aggregate(black_box(&rs), black_box(&pairs)).unwrap())
        });
    }
    group.finish();
}

fn canonicalize(c: &mut Criterion) {
    let sql = "select l_returnflag,  l_linestatus, sum(l_quantity) as sum_qty from lineitem\n where l_shipdate <= date('1998-12-01', '-90 days') group by l_returnflag, l_linestatus order by l_returnflag";
    c.bench_function("canonicalize_sql", |b| b.iter(|| canonicalize_sql(black_box(sql))));
}

criterion_group!(benches, aggregation, canonicalize);
criterion_main!(benches);
