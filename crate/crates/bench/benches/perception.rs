use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use surgtwin_bench::fixture;
use surgtwin_core::perception::icp::{icp_estimate, IcpConfig};
use surgtwin_core::perception::threshold::{depth_threshold_segment, ThresholdConfig};
use surgtwin_core::perception::{perceive, PerceptionPipeline, WorldHandle};
use surgtwin_core::scene::render::frame_from_cast;
use surgtwin_core::scene::{prompts_for, raycast};
use surgtwin_core::EnvironmentKind;

fn render(c: &mut Criterion) {
    let f = fixture(EnvironmentKind::Ideal, 1);
    c.bench_function("raycast 640x480", |b| b.iter(|| raycast(black_box(&f.world))));
    c.bench_function("frame from cast", |b| b.iter(|| frame_from_cast(&f.world, black_box(&f.cast), 1, 1)));
}

fn segmentation(c: &mut Criterion) {
    let f = fixture(EnvironmentKind::Ideal, 1);
    let prompts = prompts_for(&f.world);
    let cfg = ThresholdConfig::default();
    c.bench_function("depth threshold segment", |b| {
        b.iter(|| depth_threshold_segment(black_box(&f.frame), &prompts, &cfg).unwrap())
    });
}

fn registration(c: &mut Criterion) {
    let mut g = c.benchmark_group("icp block");
    for kind in [EnvironmentKind::Ideal, EnvironmentKind::TiltedPegboard] {
        let f = fixture(kind, 1);
        let cfg = IcpConfig::default();
        g.bench_function(kind.as_str(), |b| {
            b.iter(|| icp_estimate(black_box(&f.block_cloud), &f.models["block"], &cfg).unwrap())
        });
    }
    g.finish();
}

fn pipeline(c: &mut Criterion) {
    let f = fixture(EnvironmentKind::BlackRedBlock, 1);
    let prompts = prompts_for(&f.world);
    let dth = PerceptionPipeline::depth_threshold_icp();
    c.bench_function("perceive depth threshold + icp", |b| {
        b.iter(|| {
            let handle = WorldHandle { world: &f.world, cast: &f.cast };
            perceive(black_box(&f.frame), &prompts, &dth, handle, &f.models, 1, 0.0).unwrap()
        })
    });
}

criterion_group!(benches, render, segmentation, registration, pipeline);
criterion_main!(benches);
