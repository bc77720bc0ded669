use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use kappa_sphere::retrieval::{knn, knn_all};
use kappa_sphere_bench::retrieval_fixture;

fn retrieval(c: &mut Criterion) {
    let mut g = c.benchmark_group("knn");
    for ipc in [40, 400] {
        let (queries, database) = retrieval_fixture(ipc, 0);
        g.bench_with_input(BenchmarkId::new("single_query_k10", database.len()), &database, |b, db| {
            b.iter(|| knn(queries.ids()[0], black_box(queries.row(0)), db, 10).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("all_queries_k10", database.len()), &database, |b, db| {
            b.iter(|| knn_all(black_box(&queries), db, 10).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, retrieval);
criterion_main!(benches);
