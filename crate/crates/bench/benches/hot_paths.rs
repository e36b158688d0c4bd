use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use crex_bench::{config, sequence};
use crex_core::encoder::TokenVocab;
use crex_core::memory::kmeans::{closest_to_centroids, kmeans};
use crex_core::training::Learner;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn encode(c: &mut Criterion) {
    let seq = sequence();
    let mut group = c.benchmark_group("encode");
    for d in [32, 64] {
        let learner = Learner::new(config(d), TokenVocab::from_sequence(&seq)).unwrap();
        let sample = &seq.task(0).train[0];
        group.bench_function(format!("d{d}"), |b| {
            b.iter(|| learner.model.encoder.encode(black_box(sample)).unwrap())
        });
    }
    group.finish();
}

fn kmeans_selection(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let points: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let keys: Vec<usize> = (0..points.len()).collect();
    c.bench_function("kmeans_200x64_k10", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let clustering = kmeans(black_box(&points), 10, &mut rng);
            closest_to_centroids(&points, &keys, &clustering)
        })
    });
}

// Task 1 is the first one with replay, analogous augmentation and distillation.
fn replay_task(c: &mut Criterion) {
    let seq = sequence();
    let mut learner = Learner::new(config(32), TokenVocab::from_sequence(&seq)).unwrap();
    learner.run_task(seq.task(0)).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("second_task_d32", |b| {
        b.iter_batched(
            || learner.clone(),
            |mut l| l.run_task(seq.task(1)).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, encode, kmeans_selection, replay_task);
criterion_main!(benches);
