use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::Vector3;

use evo_core::depth_filter::{init_filter, update, DepthMeasurement};
use evo_core::event_io::parse_config;
use evo_core::frame_builder::{detect_harris, Image};
use evo_core::geometry::{eight_point, project, CameraIntrinsics, PoseSE3, Twist};
use evo_core::pose_optimizer::{optimize_pose, Observation, OptimizerSettings};
use evo_core::synth_eval::{generate_scene, SceneSpec};
use evo_core::vo_pipeline::{frames_from_tracks, ExecutionMode, PipelineSettings, VoPipeline};

/// Deterministic point cloud 4-10 m in front of the camera.
fn cloud(n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|i| {
            let s = i as f64;
            Vector3::new(
                3.0 * (s * 0.73).sin(),
                2.0 * (s * 1.31).cos(),
                7.0 + 3.0 * (s * 0.37).sin(),
            )
        })
        .collect()
}

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(320.0, 320.0, 320.0, 240.0, 640, 480).unwrap()
}

fn bench_pose(c: &mut Criterion) {
    let k = intrinsics();
    let truth = PoseSE3::exp(&Twist::new(
        Vector3::new(0.1, -0.05, 0.2),
        Vector3::new(0.01, 0.02, -0.01),
    ));
    let obs: Vec<Observation> = cloud(100)
        .into_iter()
        .map(|p| Observation::new(project(&truth.transform(&p), &k).unwrap(), p))
        .collect();
    let settings = OptimizerSettings::default();
    c.bench_function("optimize_pose/100", |b| {
        b.iter(|| optimize_pose(&PoseSE3::identity(), black_box(&obs), &k, &settings).unwrap())
    });
}

fn bench_eight_point(c: &mut Criterion) {
    let rel = PoseSE3::exp(&Twist::new(
        Vector3::new(0.5, 0.0, 0.1),
        Vector3::new(0.0, 0.05, 0.0),
    ));
    let pairs: Vec<_> = cloud(100)
        .into_iter()
        .map(|p| (p / p.z, rel.transform(&p) / rel.transform(&p).z))
        .collect();
    c.bench_function("eight_point/100", |b| {
        b.iter(|| eight_point(black_box(&pairs)).unwrap())
    });
}

fn bench_depth_update(c: &mut Criterion) {
    let state = init_filter(0.5, 50.0, 0).unwrap();
    let m = DepthMeasurement {
        d_tilde: 7.0,
        tau2: 0.04,
    };
    c.bench_function("depth_filter/10_updates", |b| {
        b.iter(|| {
            let mut s = state;
            for _ in 0..10 {
                s = update(&s, black_box(&m));
            }
            s
        })
    });
}

fn bench_harris(c: &mut Criterion) {
    let img = Image::from_fn(240, 180, |x, y| {
        if ((x / 20) + (y / 20)) % 2 == 0 {
            1.0
        } else {
            0.0
        }
    });
    c.bench_function("harris/240x180", |b| {
        b.iter(|| detect_harris(black_box(&img), 100, 10.0))
    });
}

fn bench_pipeline(c: &mut Criterion) {
    let spec = SceneSpec {
        frames: 100,
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec).unwrap();
    let config = parse_config(&spec.pipeline_config().to_text()).unwrap();
    let frames = frames_from_tracks(&scene.tracks, config.frame_interval);
    let settings = PipelineSettings::from_config(&config);
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("synthetic_100_frames", |b| {
        b.iter(|| {
            VoPipeline::run(
                settings.clone(),
                ExecutionMode::Deterministic,
                black_box(&frames),
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_pose,
    bench_eight_point,
    bench_depth_update,
    bench_harris,
    bench_pipeline
);
criterion_main!(benches);
