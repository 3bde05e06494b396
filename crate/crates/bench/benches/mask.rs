use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use reid_core::augment::{random_rectangle_mask, MaskSpec};

fn bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("rectangle_mask_256x128");
    for ratio in [0.1, 0.3, 0.5] {
        let spec = MaskSpec::default().with_ratio(ratio);
        let mut rng = reid_bench::rng(0);
        group.bench_with_input(BenchmarkId::from_parameter(ratio), &spec, |b, spec| {
            b.iter(|| random_rectangle_mask(256, 128, spec, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
