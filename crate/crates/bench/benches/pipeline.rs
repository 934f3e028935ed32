use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use scatternet::em::{assemble_impedance, excitation, FactorizedSystem};
use scatternet::GeometryContext;
use scatternet_bench::{cube, model_and_context, model_config, wave};

fn oracle(c: &mut Criterion) {
    let w = wave();
    let mut group = c.benchmark_group("oracle");
    group.sample_size(10);
    for side in [0.1, 0.15] {
        let mesh = cube(side);
        let n = mesh.face_count();
        group.bench_with_input(BenchmarkId::new("assemble", n), &mesh, |b, m| {
            b.iter(|| assemble_impedance(black_box(m), w.wavenumber()))
        });
        let z = Arc::new(assemble_impedance(&mesh, w.wavenumber()));
        let v = excitation(&mesh, &w);
        group.bench_with_input(BenchmarkId::new("factor_and_solve", n), &z, |b, z| {
            b.iter(|| FactorizedSystem::new(z.clone()).unwrap().solve(&v).unwrap())
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let w = wave();
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    for side in [0.15, 0.3] {
        let mesh = cube(side);
        let (model, ctx) = model_and_context(&mesh);
        let n = mesh.face_count();
        group.bench_with_input(BenchmarkId::new("context", n), &mesh, |b, m| {
            b.iter(|| GeometryContext::new(black_box(m), w.wavelength(), &model_config()).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("predict", n), &ctx, |b, ctx| {
            b.iter(|| model.predict(black_box(ctx), &w).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, oracle, model);
criterion_main!(benches);
