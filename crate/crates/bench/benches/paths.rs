use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sfpe::sde::{simulate_first_variation, simulate_inverse_variation, simulate_path};
use sfpe::{RngStream, TimeGrid};
use sfpe_bench::{point, problem};

fn euler_paths(c: &mut Criterion) {
    let mut group = c.benchmark_group("euler_path");
    for name in ["ou-linear", "gbm-1d", "manufactured-d5"] {
        let spec = problem(name);
        let x = if name == "gbm-1d" {
            sfpe::DVector::from_element(1, 1.0)
        } else {
            point(spec.dim)
        };
        let grid = TimeGrid::uniform(0.0, spec.horizon, 200).unwrap();
        group.bench_with_input(BenchmarkId::new("path", name), &spec, |b, spec| {
            b.iter(|| simulate_path(spec, &x, &grid, RngStream::new(1)).unwrap())
        });
        let path = simulate_path(&spec, &x, &grid, RngStream::new(1)).unwrap();
        group.bench_with_input(BenchmarkId::new("variations", name), &spec, |b, spec| {
            b.iter(|| {
                let y = simulate_first_variation(spec, &path).unwrap();
                let z = simulate_inverse_variation(spec, &path).unwrap();
                (y, z)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, euler_paths);
criterion_main!(benches);
