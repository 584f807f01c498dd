//! Throughput of batch inference through the shared map layer (pooled when
//! the `parallel` feature is on) against a plain sequential loop over
//! [`infer_one`], across batch sizes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use exitlab::exiting::{infer_batch, infer_one, ExitPolicy};
use exitlab::model::{Model, ModelConfig};
use exitlab::prototypes::PrototypeBank;

fn fixture(rng: &mut ChaCha8Rng) -> (Model, PrototypeBank) {
    let model = Model::new(ModelConfig::default()).unwrap();
    let mut bank = model.config.new_bank(0.5).unwrap();
    let dim = bank.dim();
    for layer in 1..model.config.layers {
        let count = 4 * model.config.classes;
        let reps: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..count).map(|i| i % model.config.classes).collect();
        bank.update(layer, &reps, &labels).unwrap();
    }
    (model, bank)
}

fn batch(rng: &mut ChaCha8Rng, n: usize, d_in: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d_in).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect()
}

fn bench_inference(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (model, bank) = fixture(&mut rng);
    let policy = ExitPolicy::Edr { tau: 0.5, lambda: 1.0 };

    let mut group = c.benchmark_group("batch_inference");
    for &n in &[64usize, 256, 1024] {
        let xs = batch(&mut rng, n, model.config.d_in);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("mapped", n), &xs, |b, xs| {
            b.iter(|| infer_batch(&model, &bank, &policy, xs, None).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &xs, |b, xs| {
            b.iter(|| {
                xs.iter()
                    .map(|x| infer_one(&model, &bank, &policy, x, None).unwrap())
                    .collect::<Vec<_>>()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_inference);
criterion_main!(benches);
