use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relab_bench::{private_batch, GEOMETRY};
use relab_core::attacks::{objective_and_gradient, AttackConfig, Strategy};
use relab_core::erasing::{augment_batch, sample_erase_region};
use relab_core::nn::{build_model, extract_features, ArchSpec};
use relab_core::ErasePolicy;

fn masking(c: &mut Criterion) {
    let policy = ErasePolicy::random_erase(0.1, 0.8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("sample_erase_region 64x64", |b| {
        b.iter(|| sample_erase_region(64, 64, black_box(&policy), &mut rng).unwrap())
    });
    let batch = private_batch(8, 16);
    let re = ErasePolicy::random_erase(0.1, 0.5);
    c.bench_function("augment_batch 128 images", |b| {
        b.iter(|| augment_batch(black_box(&batch), &re, 3, 7).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let batch = private_batch(8, 4);
    let model = build_model(&ArchSpec::classifier_small(GEOMETRY, 8), 0).unwrap();
    c.bench_function("classifier forward 32 images", |b| {
        b.iter(|| extract_features(&model, black_box(&batch)).unwrap())
    });
}

fn attack_step(c: &mut Criterion) {
    let target = build_model(&ArchSpec::classifier_small(GEOMETRY, 32), 0).unwrap();
    let decoder = build_model(&ArchSpec::decoder(GEOMETRY, 64).unwrap(), 1).unwrap();
    let latent = AttackConfig { strategy: Strategy::LatentSpace, ..AttackConfig::default() };
    let z = vec![0.1; 64];
    c.bench_function("latent objective and gradient", |b| {
        b.iter(|| objective_and_gradient(&target, Some(&decoder), &latent, 3, black_box(&z), None).unwrap())
    });
    let pixel = AttackConfig { strategy: Strategy::PixelSpace, ..AttackConfig::default() };
    let x = vec![0.5; GEOMETRY.len()];
    c.bench_function("pixel objective and gradient", |b| {
        b.iter(|| objective_and_gradient(&target, None, &pixel, 3, black_box(&x), None).unwrap())
    });
}

criterion_group!(benches, masking, forward, attack_step);
criterion_main!(benches);
