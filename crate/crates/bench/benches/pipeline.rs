use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::Vector3;
use splat4d_core::gate::GateMode;
use splat4d_core::neural::{NetShape, SceneNets, Tape};
use splat4d_core::pipeline::{constant_cloud, evaluate, frame_on_tape, render_sequence, Scene};
use splat4d_core::plan::{TimelineProgram, TransitionSpan};
use splat4d_core::render::{render_frame, Camera};
use splat4d_core::scene::{eval_field, make_primitive, PrimitiveKind, SceneSnapshot};
use splat4d_core::trainer::{ReconstructionGuidance, TrainConfig, Trainer};

fn pair_scene(points: usize) -> Scene {
    let a = make_primitive(PrimitiveKind::Sphere, points, 1, Vector3::new(0.9, 0.2, 0.1)).unwrap().scaled(0.35);
    let b = make_primitive(PrimitiveKind::Box, points, 2, Vector3::new(0.1, 0.3, 0.9)).unwrap().scaled(0.2);
    let mut timeline = TimelineProgram::stationary(&["a", "b"], 16);
    timeline.objects[0].init_pos = [-0.45, 0.0, 0.0];
    timeline.objects[1].init_pos = [0.45, 0.0, 0.0];
    timeline.transitions.push(TransitionSpan { source: 0, target: 1, start: 0.4, end: 0.6 });
    let shape = NetShape { hidden: vec![32, 32], bands_x: 4, bands_t: 4 };
    let nets = SceneNets::new(2, 1, false, &shape, 10.0, 0).unwrap();
    Scene::new(vec![a, b], timeline, nets).unwrap()
}

fn field(c: &mut Criterion) {
    let cloud = make_primitive(PrimitiveKind::Torus, 32, 3, Vector3::repeat(0.5)).unwrap();
    let x = Vector3::new(0.3, 0.1, -0.2);
    c.bench_function("eval_field/32", |b| b.iter(|| eval_field(&cloud, &x).unwrap()));
}

fn render(c: &mut Criterion) {
    let mut group = c.benchmark_group("render_frame");
    for n in [1_000, 10_000] {
        let cloud = make_primitive(PrimitiveKind::Sphere, n, 4, Vector3::repeat(0.8)).unwrap();
        let snap = SceneSnapshot::ungated(0.0, vec![cloud]);
        let cam = Camera::orbit(30.0, 15.0, 3.5, 128, 128).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &snap, |b, s| b.iter(|| render_frame(s, &cam).unwrap()));
    }
    group.finish();
}

fn pipeline(c: &mut Criterion) {
    let scene = pair_scene(500);
    let cam = Camera::orbit(0.0, 15.0, 3.0, 64, 64).unwrap();
    c.bench_function("evaluate/2x500", |b| b.iter(|| evaluate(&scene, 0.45).unwrap()));
    c.bench_function("render_sequence/2x500x16", |b| {
        b.iter(|| render_sequence(&scene, GateMode::default(), &[cam], 16).unwrap())
    });
    c.bench_function("frame_backward/2x500", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let clouds: Vec<_> = scene.objects.iter().map(|o| constant_cloud(&mut tape, o)).collect();
            let frame = frame_on_tape(&mut tape, &scene, &clouds, 0.45, &cam).unwrap();
            let loss = tape.sum_squares(frame.image);
            tape.backward(loss).unwrap()
        })
    });
}

fn training(c: &mut Criterion) {
    let scene = pair_scene(500);
    let cam = Camera::orbit(0.0, 15.0, 3.0, 32, 32).unwrap();
    let targets = render_sequence(&scene, GateMode::default(), &[cam], 16).unwrap();
    let guidance = ReconstructionGuidance::new(vec![targets]).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("dynamics/2x500x16", |b| {
        let mut trainer = Trainer::new(scene.clone(), &guidance, TrainConfig::dynamics(usize::MAX, 0)).unwrap();
        b.iter(|| trainer.step().unwrap())
    });
    group.bench_function("refine/2x500", |b| {
        let mut config = TrainConfig::refine(usize::MAX, 0);
        config.densify.enabled = false;
        let mut trainer = Trainer::new(scene.clone(), &guidance, config).unwrap();
        b.iter(|| trainer.step().unwrap())
    });
    group.finish();
}

criterion_group!(benches, field, render, pipeline, training);
criterion_main!(benches);
