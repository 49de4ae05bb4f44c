use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use sceneflow_core::objective::total_objective;
use sceneflow_core::planesweep::{stereo_depth, SweepConfig};
use sceneflow_core::ssim::ssim;
use sceneflow_core::synth::{render, GroundTruthBundle, SceneSpec};
use sceneflow_core::warp::reverse_warp;
use sceneflow_core::ObjectiveConfig;

fn scene() -> GroundTruthBundle {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenes/moving_box.scene");
    let text = std::fs::read_to_string(path).expect("shipped scene");
    render(&SceneSpec::parse(&text, path).unwrap()).unwrap()
}

fn kernels(c: &mut Criterion) {
    let b = scene();
    let f = &b.frames;
    let k = b.rig.left_t.k;
    let lr = b.rig.lr_t();

    c.bench_function("reverse_warp 128x96", |bench| {
        bench.iter(|| reverse_warp(black_box(&f.right_t), &b.depth_t, None, &k, &k, &lr).unwrap())
    });
    c.bench_function("ssim 128x96", |bench| bench.iter(|| ssim(black_box(&f.left_t), &f.right_t).unwrap()));

    let sweep = SweepConfig::default();
    let mut g = c.benchmark_group("slow");
    g.sample_size(10);
    g.bench_function("plane sweep 64 bins", |bench| {
        bench.iter(|| stereo_depth(black_box(&f.left_t), &f.right_t, &k, &lr, &sweep).unwrap())
    });
    let problem = b.problem(ObjectiveConfig::default()).unwrap();
    let state = b.state(ObjectiveConfig::default().roi_size).unwrap();
    g.bench_function("objective and gradient", |bench| {
        bench.iter(|| total_objective(&problem, black_box(&state)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
