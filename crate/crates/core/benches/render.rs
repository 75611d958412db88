//! Full-view rendering and one training objective, run inside a one-thread
//! pool and inside the default pool. Build with `--no-default-features` to
//! time the sequential fallback itself.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hdrfield::eval::render_view;
use hdrfield::losses::objective::{evaluate, ObjectiveConfig};
use hdrfield::synth::{generate_dataset, SceneSpec};
use hdrfield::trainer::{init_model, sample_batch, step_rng, TrainConfig};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("parallel", rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()),
    ]
}

fn bench(c: &mut Criterion) {
    let spec = SceneSpec::blinker_sized(32, 32, 6);
    let data = generate_dataset(&spec, None, None).unwrap();
    let mut cfg = TrainConfig::new(1, 0);
    cfg.fields.static_layers = 2;
    cfg.fields.static_width = 32;
    cfg.fields.dynamic_layers = 2;
    cfg.fields.dynamic_width = 32;
    let model = init_model(&cfg, &data).unwrap();
    let frames = data.training_frames();
    let batch = sample_batch(&data, 2, 64, &mut step_rng(0, 0)).unwrap();
    let obj = ObjectiveConfig {
        samples: 16,
        ..ObjectiveConfig::default()
    };

    let mut g = c.benchmark_group("render_view_32x32");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &pool, |b, pool| {
            b.iter(|| pool.install(|| render_view(&model, &frames[2].camera, frames[2].time, spec.z_near, spec.z_far, 16).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("objective_64_rays");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &pool, |b, pool| {
            b.iter(|| pool.install(|| evaluate(&model, &frames, &batch, &obj, true).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
