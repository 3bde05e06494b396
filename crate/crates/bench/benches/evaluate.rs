use criterion::{criterion_group, criterion_main, Criterion};
use reid_core::retrieval::{evaluate_distances, Labels};

fn bench(c: &mut Criterion) {
    let f = reid_bench::eval_fixture(200, 2000, 100);
    c.bench_function("evaluate_200x2000", |b| {
        b.iter(|| {
            evaluate_distances(
                &f.dist,
                Labels {
                    ids: &f.qid,
                    cameras: &f.qcam,
                    junk: &f.qjunk,
                },
                Labels {
                    ids: &f.gid,
                    cameras: &f.gcam,
                    junk: &f.gjunk,
                },
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, bench);
criterion_main!(benches);
