use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sfpe::{solve, PicardConfig, Quadrature, RngStream, Scheme};
use sfpe_bench::{point, problem};

fn picard(c: &mut Criterion) {
    let spec = problem("manufactured-d2");
    let x = point(2);
    let mut group = c.benchmark_group("picard");
    group.sample_size(10);
    for (label, scheme, samples) in [
        ("plain", Scheme::Plain, vec![2, 4, 200]),
        ("multilevel", Scheme::Multilevel, vec![4, 16, 200]),
    ] {
        let cfg = PicardConfig::new(samples)
            .grid_steps(8)
            .quadrature(Quadrature::RandomizedUniform)
            .scheme(scheme);
        group.bench_with_input(BenchmarkId::new(label, cfg.predicted_steps()), &cfg, |b, cfg| {
            b.iter(|| solve(&spec, 0.1, &x, cfg, RngStream::new(4)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, picard);
criterion_main!(benches);
