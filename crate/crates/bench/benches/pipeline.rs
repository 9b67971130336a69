// SPDX-License-Identifier: Apache-2.0

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use vbse_bench::noisy_utterance;
use vbse_core::autograd::Var;
use vbse_core::dsp::{StftConfig, StftPlan};
use vbse_core::metrics::{ssnr, stoi};
use vbse_core::model::{se_terrnet_forward, ModelConfig, ParameterSet};
use vbse_core::tensor::Tensor;

fn stft_round_trip(c: &mut Criterion) {
    let (_, y) = noisy_utterance(2.5, 1);
    let plan = StftPlan::new(StftConfig::default()).unwrap();
    c.bench_function("stft analyze+synthesize 2.5 s", |b| {
        b.iter(|| {
            let (re, im) = plan.analyze(black_box(y.samples())).unwrap();
            let frames = re.len() / plan.config().n_bins();
            plan.synthesize(&re, &im, frames, y.len())
        })
    });
}

fn conv(c: &mut Criterion) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let x = Var::param(Tensor::randn(&[1, 16, 64, 129], 1.0, &mut rng));
    let w = Var::param(Tensor::randn(&[16, 16, 3, 3], 0.1, &mut rng));
    c.bench_function("conv2d 16->16 3x3 on 64x129, forward+backward", |b| {
        b.iter(|| {
            let y = x.conv2d(&w, None, (1, 1), (2, 2), (2, 2), 1);
            y.mul(&y).sum().backward()
        })
    });
}

fn forward(c: &mut Criterion) {
    let (_, y) = noisy_utterance(1.0, 2);
    let micro = ModelConfig::micro();
    let p = ParameterSet::init(&micro, 0).unwrap();
    c.bench_function("micro forward 1 s", |b| {
        b.iter(|| se_terrnet_forward(black_box(&y), &p, &micro).unwrap())
    });
    let full = ModelConfig::default();
    let p = ParameterSet::init(&full, 0).unwrap();
    let mut g = c.benchmark_group("default");
    g.sample_size(10);
    g.bench_function("default forward 1 s", |b| {
        b.iter(|| se_terrnet_forward(black_box(&y), &p, &full).unwrap())
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let (clean, noisy) = noisy_utterance(3.0, 3);
    c.bench_function("stoi 3 s", |b| {
        b.iter(|| stoi(black_box(&clean), &noisy).unwrap())
    });
    c.bench_function("ssnr 3 s", |b| {
        b.iter(|| ssnr(black_box(&clean), &noisy).unwrap())
    });
}

criterion_group!(benches, stft_round_trip, conv, forward, metrics);
criterion_main!(benches);
