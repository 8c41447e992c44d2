use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use nkn_bench::synthetic;
use nkn_core::nkn::kernel_gram;
use nkn_core::primitives::softplus_inv;
use nkn_core::structured::kron_matvec;
use nkn_core::{preset, GpModel, InitContext, ParameterStore, Preset};

fn forward_scaling(c: &mut Criterion) {
    let mut group = c.benchmark_group("default6_gram");
    group.sample_size(10);
    for n in [50, 100, 200, 400] {
        let (x, _) = synthetic(n, 4, 0);
        let spec = preset(&Preset::Default6, &InitContext::from_points(&x, 0)).unwrap();
        let store = ParameterStore::from_spec(&spec, softplus_inv(0.1)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| kernel_gram(&spec, &store, &x).unwrap())
        });
    }
    group.finish();
}

fn lml_gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("lml_gradient");
    group.sample_size(10);
    for p in [Preset::Rbf, Preset::Default6] {
        let (x, y) = synthetic(200, 4, 1);
        let spec = preset(&p, &InitContext::from_points(&x, 0)).unwrap();
        let store = ParameterStore::from_spec(&spec, softplus_inv(0.1)).unwrap();
        let model = GpModel::new(spec, store, &x, &y).unwrap();
        group.bench_function(format!("{p:?}"), |b| b.iter(|| model.grad_log_marginal().unwrap()));
    }
    group.finish();
}

fn kronecker_matvec(c: &mut Criterion) {
    let mut group = c.benchmark_group("kron_matvec");
    for side in [16, 32, 64] {
        let g = DMatrix::from_fn(side, side, |i, j| (-((i as f64 - j as f64) / 4.0).powi(2)).exp());
        let grams = vec![g.clone(), g];
        let v: Vec<f64> = (0..side * side).map(|k| (k as f64).sin()).collect();
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| {
            b.iter(|| kron_matvec(&grams, &v).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward_scaling, lml_gradient, kronecker_matvec);
criterion_main!(benches);
