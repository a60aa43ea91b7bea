use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dinozaur_core::data::{sample_random_field, RandomFieldSpec};
use dinozaur_core::operator::{BlockKind, Network, NetworkSpec};
use dinozaur_core::rng::SeededRng;

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("network");
    group.sample_size(20);
    for (dims, kmax, block) in [
        (vec![128], vec![16], BlockKind::Diffusion),
        (vec![128], vec![16], BlockKind::FnoDense),
        (vec![32, 32], vec![8, 8], BlockKind::Diffusion),
        (vec![32, 32], vec![8, 8], BlockKind::FnoDense),
    ] {
        let spec = NetworkSpec::new(dims.clone(), kmax, 32, 4, 1, 1, block);
        let mut rng = SeededRng::new(1, 0);
        let (net, store) = Network::init(&spec, &mut rng, true).unwrap();
        let input = sample_random_field(&RandomFieldSpec::default(), &spec.grid().unwrap(), 1, &mut rng).unwrap();
        let times = net.log_times(&store);
        let label = format!("{block}/{dims:?}");
        group.bench_function(BenchmarkId::new("forward", &label), |b| {
            b.iter(|| net.predict(&store, black_box(&input), &times).unwrap())
        });
        group.bench_function(BenchmarkId::new("forward+backward", &label), |b| {
            b.iter(|| {
                let (out, cache) = net.forward(&store, black_box(&input), &times).unwrap();
                let mut grads = store.grad_buffer();
                net.backward(&store, &times, &cache, out.values(), &mut grads).unwrap();
                grads
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
