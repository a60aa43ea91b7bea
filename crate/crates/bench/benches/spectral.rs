use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dinozaur_core::rng::SeededRng;
use dinozaur_core::spectral::{self, Complex64, Grid, ModeSet};

fn truncated_transforms(c: &mut Criterion) {
    let channels = 32;
    let mut group = c.benchmark_group("spectral");
    for (dims, kmax) in [(vec![256], vec![16]), (vec![64, 64], vec![12, 12]), (vec![32, 32, 32], vec![8, 8, 8])] {
        let grid = Grid::new(dims.clone()).unwrap();
        let plan = spectral::plan(&grid, &ModeSet::new(kmax).unwrap()).unwrap();
        let mut values = vec![0.0; grid.len() * channels];
        SeededRng::new(0, 0).fill_normal(&mut values);
        let mut coeffs = vec![Complex64::new(0.0, 0.0); plan.num_modes() * channels];
        let label = format!("{dims:?}");
        group.bench_function(BenchmarkId::new("analyze", &label), |b| {
            b.iter(|| plan.analyze(black_box(&values), channels, &mut coeffs))
        });
        let mut out = vec![0.0; values.len()];
        group.bench_function(BenchmarkId::new("synthesize", &label), |b| {
            b.iter(|| plan.synthesize(black_box(&coeffs), channels, true, &mut out))
        });
    }
    group.finish();
}

criterion_group!(benches, truncated_transforms);
criterion_main!(benches);
