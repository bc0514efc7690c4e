use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use veil_core::cdm::{rvq_quantize, CdmConfig, CdmModel, RvqStack};
use veil_core::channel::{codec_roundtrip, ChannelConfig, CodecId};
use veil_core::metrics::{eer, ScoreSet};
use veil_core::privacy::{permutation_count, shuffle, ShuffleMode};
use veil_core::signal::{mel_spectrogram, sine, stft};

fn signal_kernels(c: &mut Criterion) {
    let x = sine(220.0, 0.5, 1.0, 16_000);
    c.bench_function("stft 1 s, n_fft 512 hop 128", |b| b.iter(|| stft(black_box(&x), 512, 128).unwrap()));
    c.bench_function("mel 1 s, 64 bands", |b| b.iter(|| mel_spectrogram(black_box(&x), 9, 64).unwrap()));
    let cfg = ChannelConfig::identity();
    c.bench_function("gsm-like roundtrip 1 s", |b| {
        b.iter(|| codec_roundtrip(black_box(&x), &CodecId::BandlimitGsmLike, &cfg).unwrap())
    });
}

fn quantizer(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (dim, frames) = (32, 250);
    let stack = RvqStack::random(1024, dim, 1.0, 0.99, &mut rng).unwrap();
    let e: Vec<f32> = (0..dim * frames).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("rvq 8 x 1024, 5 s of frames", |b| {
        b.iter(|| rvq_quantize(black_box(&e), frames, &stack).unwrap())
    });
    let model = CdmModel::new(CdmConfig::default(), 0).unwrap();
    let x = sine(220.0, 0.5, 1.0, 16_000);
    let mut g = c.benchmark_group("codec");
    g.sample_size(10);
    g.bench_function("tokenize 1 s", |b| b.iter(|| model.tokenize(black_box(&x)).unwrap()));
    g.finish();
}

fn privacy_and_metrics(c: &mut Criterion) {
    let (ch, frames) = (224, 500);
    let a: Vec<f32> = (0..ch * frames).map(|i| i as f32).collect();
    c.bench_function("window shuffle 224 x 500", |b| {
        b.iter(|| shuffle(black_box(&a), ch, frames, ShuffleMode::Random { seed: 1 }, 50).unwrap())
    });
    c.bench_function("exact permutation count 200/50", |b| b.iter(|| permutation_count(black_box(200), 50).unwrap()));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let set = ScoreSet::new(
        (0..5000).map(|_| rng.random_range(0.3..1.0)).collect(),
        (0..5000).map(|_| rng.random_range(0.0..0.7)).collect(),
    );
    c.bench_function("eer 10k scores", |b| b.iter(|| eer(black_box(&set)).unwrap()));
}

criterion_group!(benches, signal_kernels, quantizer, privacy_and_metrics);
criterion_main!(benches);
