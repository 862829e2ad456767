//! Run once with the default features and once with
//! `--no-default-features` to compare the rayon and sequential paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tcvc::backbone::build_toy_backbone;
use tcvc::fusion::{FfmConfig, FfmParams};
use tcvc::metrics::cdc;
use tcvc::pipeline::{assemble_rgb, colorize_video, generate_synthetic, SynthSpec};
use tcvc::srl::{train_tcvc, TrainConfig, TrainingSequence};

fn mode() -> &'static str {
    if tcvc::par::is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

fn bench_colorize(c: &mut Criterion) {
    let video = generate_synthetic(&SynthSpec::random_world(1, 32, 32, 17), 1).unwrap();
    let backbone = build_toy_backbone(0);
    let ffm = FfmParams::new(FfmConfig::new(32).with_hidden(16), 0);
    let mut g = c.benchmark_group("colorize_video");
    g.sample_size(10);
    for n in [5, 17] {
        g.bench_with_input(BenchmarkId::new(mode(), n), &n, |b, &n| {
            b.iter(|| colorize_video(&video.gray, &backbone, &ffm, &video.flows, n).unwrap())
        });
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let video = generate_synthetic(&SynthSpec::random_world(2, 32, 32, 8), 2).unwrap();
    let seq = TrainingSequence::new(video.gray, video.flows).unwrap();
    let backbone = build_toy_backbone(0);
    let ffm = FfmParams::new(FfmConfig::new(32).with_hidden(16), 0);
    let cfg = TrainConfig {
        interval_len: 6,
        batch: 4,
        patch: 32,
        lr0: 1e-3,
        iterations: 1,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("train_iteration");
    g.sample_size(10);
    g.bench_function(mode(), |b| {
        b.iter(|| train_tcvc(&backbone, &ffm, std::slice::from_ref(&seq), &cfg).unwrap())
    });
    g.finish();
}

fn bench_cdc(c: &mut Criterion) {
    let video = generate_synthetic(&SynthSpec::random_world(3, 64, 64, 30), 3).unwrap();
    let frames = assemble_rgb(&video.gray, &video.chroma).unwrap();
    c.bench_function(&format!("cdc/{}", mode()), |b| b.iter(|| cdc(&frames).unwrap()));
}

criterion_group!(benches, bench_colorize, bench_train_step, bench_cdc);
criterion_main!(benches);
