//! Sequential versus rayon execution of the data-parallel kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use jumplab_core::chain::{sample_marginals, JumpSampler, SamplerConfig};
use jumplab_core::conductivity::{double_cone, isotropic_stable, stable_constant};
use jumplab_core::exec::Execution;
use jumplab_core::forms::{form_comparison, random_grid_function, ChainConstants};
use jumplab_core::heatkernel::{generator_matrix, heat_kernel, Boundary, GeneratorOptions};
use jumplab_core::lattice::{GridPoint, ScaledLattice, Window};
use std::hint::black_box;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn heat(c: &mut Criterion) {
    let field = isotropic_stable(ScaledLattice::integer(2), 1.0, stable_constant(2, 1.0)).unwrap();
    let w = Window::centered(*field.lattice(), 12.0).unwrap();
    let mut group = c.benchmark_group("heat_kernel");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let g = generator_matrix(&field, &w, Boundary::FullRateKilled, GeneratorOptions::default(), exec).unwrap();
                black_box(heat_kernel(&g, &[0.5, 1.0], &GridPoint::origin(2), exec).unwrap())
            })
        });
    }
    group.finish();
}

fn paths(c: &mut Criterion) {
    let field = isotropic_stable(ScaledLattice::new(1, 4.0).unwrap(), 1.0, stable_constant(1, 1.0)).unwrap();
    let sampler = JumpSampler::new(&field, None, SamplerConfig::default()).unwrap();
    let mut group = c.benchmark_group("sample_paths");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(sample_marginals(&sampler, &GridPoint::origin(1), 1.0, 20_000, 3, exec).unwrap()))
        });
    }
    group.finish();
}

fn forms(c: &mut Criterion) {
    let cone = double_cone(1.0, 1.0, 1.0, 1.0, None).unwrap();
    let consts = ChainConstants { n0: 22.0, kappa2: 1e-3, theta2: 3.76 };
    let corpus: Vec<_> = (0..16).map(|i| random_grid_function(*cone.lattice(), 6, 9, i)).collect();
    let mut group = c.benchmark_group("form_comparison");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(form_comparison(&cone, consts, &corpus, 4.0, None, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, heat, paths, forms);
criterion_main!(benches);
