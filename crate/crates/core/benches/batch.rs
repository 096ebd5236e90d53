//! Minibatch gradient throughput: the library path (rayon fan-out when the
//! `parallel` feature is on) against a plain sequential loop over the same
//! per-sample work. Run with `--no-default-features` to bench the fallback.

use std::time::Duration;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use edpa::attack::{batch_gradients, sample_batch, sample_gradients, Placement};
use edpa::data::{generate_dataset, DatasetSpec};
use edpa::encoders::{Encoders, Geometry, Pooling};
use edpa::losses::ObjectiveConfig;
use edpa::patching::init_patch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_batch_gradients(c: &mut Criterion) {
    let data = generate_dataset(&DatasetSpec::suite("A", 64, 3).unwrap())
        .unwrap()
        .samples();
    let enc = Encoders::init(Geometry::default(), Pooling::Attention, 1).unwrap();
    let cfg = ObjectiveConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let patch = init_patch(&mut rng, 14, 14, 3);

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10).measurement_time(Duration::from_secs(10));
    for size in [4usize, 16, 64] {
        let batch = sample_batch(&mut rng, &data, size, Placement::Random, (14, 14)).unwrap();
        let mode = if edpa::parallel::is_parallel() {
            "library-parallel"
        } else {
            "library-sequential"
        };
        group.bench_with_input(BenchmarkId::new(mode, size), &batch, |b, batch| {
            b.iter(|| batch_gradients(&enc, black_box(batch), patch.pixels(), &cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("plain-loop", size), &batch, |b, batch| {
            b.iter(|| {
                batch
                    .iter()
                    .map(|ps| sample_gradients(&enc, ps, patch.pixels(), cfg.tau, (true, true)).unwrap())
                    .fold(0.0, |acc, g| acc + g.patch_loss + g.align_loss)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_batch_gradients);
criterion_main!(benches);
