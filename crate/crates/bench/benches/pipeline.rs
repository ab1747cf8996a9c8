use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use gspw_bench::{road, SearchFixture, VOXEL_SIZE};
use gspw_core::bev::{select_best, SearchConfig};
use gspw_core::{build_index, render, Channels, RenderOptions};

fn bench_render(c: &mut Criterion) {
    let synth = road(0);
    let scene = &synth.clean;
    let camera = &scene.cameras[0];
    let mut group = c.benchmark_group("render");
    group.sample_size(20);
    for (name, channels) in [("rgb", Channels::RGB), ("all", Channels::ALL)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &channels, |b, &channels| {
            let opts = RenderOptions::new(channels);
            b.iter(|| render(black_box(scene), camera, &opts))
        });
    }
    group.finish();
}

fn bench_index(c: &mut Criterion) {
    let synth = road(0);
    let mut group = c.benchmark_group("build_index");
    for size in [0.5, 2.5, 5.0] {
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |b, &size| {
            b.iter(|| build_index(black_box(&synth.corrupt), size, None).unwrap())
        });
    }
    group.finish();
}

fn bench_search(c: &mut Criterion) {
    let synth = road(0);
    let fx = SearchFixture::new(&synth);
    let cache = fx.cache();
    let cfg = SearchConfig {
        span_u: 30.0,
        span_v: 5.0,
        stride: Some(VOXEL_SIZE),
    };
    let mut group = c.benchmark_group("search");
    group.sample_size(10);
    group.bench_function("select_best", |b| {
        b.iter(|| {
            for (p, patch) in fx.located.patches.iter().enumerate() {
                black_box(select_best(p, patch, &fx.index, &fx.manifold, &cfg, &fx.located.excluded, &cache).unwrap());
            }
        })
    });
    group.finish();
}

criterion_group!(benches, bench_render, bench_index, bench_search);
criterion_main!(benches);
