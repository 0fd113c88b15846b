use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use red_bench::{geometry, normalized, phantom, predictor, sinogram, SIDE};
use red_core::diffusion::{reconstruct, Predictor};
use red_core::metrics::{ssim, SsimConfig, SsimMode};
use red_core::tomo::{back_project, fbp, forward_project, osem, FilterKind, Image};
use red_core::TimeGrid;

fn projector(c: &mut Criterion) {
    let (geom, img, sino) = (geometry(), phantom(), sinogram());
    c.bench_function("forward_project 64x64/96", |b| {
        b.iter(|| forward_project(black_box(&img), &geom).unwrap())
    });
    c.bench_function("back_project 96x96", |b| {
        b.iter(|| back_project(black_box(&sino), &geom).unwrap())
    });
}

fn reconstruction(c: &mut Criterion) {
    let (geom, sino) = (geometry(), sinogram());
    let init = Image::filled(SIDE, SIDE, 1.0);
    c.bench_function("fbp ramp", |b| {
        b.iter(|| fbp(black_box(&sino), &geom, FilterKind::Ramp, true).unwrap())
    });
    c.bench_function("osem 10 iters 4 subsets", |b| {
        b.iter(|| osem(black_box(&sino), &geom, 10, 4, &init).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let (net, x) = (predictor(), normalized());
    c.bench_function("net forward 96x96", |b| {
        b.iter(|| net.predict(black_box(&x), 250.0).unwrap())
    });
    let grid = TimeGrid::new(30, 500).unwrap();
    let mut group = c.benchmark_group("reverse");
    group.sample_size(10);
    group.bench_function("30 steps with drift correction", |b| {
        b.iter(|| reconstruct(black_box(&x), &net, Some(&net), &net.sched, &grid).unwrap())
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let x = normalized();
    let y: Vec<f32> = x.values.iter().map(|v| v * 0.95 + 0.01).collect();
    let shape = (x.n_angles, x.n_bins);
    for mode in [SsimMode::Global, SsimMode::Windowed] {
        let cfg = SsimConfig::for_range(1.0, mode);
        c.bench_function(&format!("ssim {mode:?}"), |b| {
            b.iter(|| ssim(black_box(&x.values), &y, shape, &cfg).unwrap())
        });
    }
}

criterion_group!(benches, projector, reconstruction, network, metrics);
criterion_main!(benches);
