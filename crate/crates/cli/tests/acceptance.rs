//! End-to-end acceptance criteria. Runs without the libtest harness so every
//! criterion prints a single line. Pass criterion numbers as arguments to
//! run a subset.

use nalgebra::{Matrix3, Quaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splat4d_core::gate::{gate_infer, GateKind, GateMode};
use splat4d_core::kinematics::{object_pose, transform_cloud};
use splat4d_core::neural::{DeformationNet, Matrix, NetShape, ParamId, SceneNets, Tape, TransitionNet};
use splat4d_core::pipeline::{evaluate, frame_on_tape, frame_times, CloudVars, FrameBatch, Scene};
use splat4d_core::plan::{compile_timeline, parse_plan, validate_plan, RateSegment, TimelineProgram, TransitionSpan};
use splat4d_core::render::{psnr, render_frame, Camera, Image};
use splat4d_core::scene::{eval_field, make_primitive, GaussianCloud, GaussianPoint, PrimitiveKind, SceneSnapshot};
use splat4d_core::trainer::{DensifyConfig, ReconstructionGuidance, TrainConfig, Trainer};
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let all = [
        Criterion { id: 1, name: "field oracle", limit: Some(Duration::from_secs(10)), run: field_oracle },
        Criterion { id: 2, name: "kinematics closed form", limit: None, run: kinematics_closed_form },
        Criterion { id: 3, name: "gradient suite", limit: Some(Duration::from_secs(120)), run: gradient_suite },
        Criterion { id: 4, name: "transition learning", limit: Some(Duration::from_secs(900)), run: transition_learning },
        Criterion { id: 5, name: "gating statistics", limit: None, run: gating_statistics },
        Criterion { id: 6, name: "phase invariants", limit: None, run: phase_invariants },
        Criterion { id: 7, name: "refinement quality", limit: Some(Duration::from_secs(1200)), run: refinement_quality },
        Criterion { id: 8, name: "plan toolchain", limit: None, run: plan_toolchain },
        Criterion { id: 9, name: "determinism", limit: None, run: determinism },
        Criterion { id: 10, name: "identity initialization", limit: None, run: identity_init },
    ];
    let mut failed = 0;
    for c in all.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match (result, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.1?}, limit {limit:?}")),
            (r, _) => r,
        };
        let secs = elapsed.as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} {:<24} PASS  {detail} [{secs:.1}s]", c.id, c.name),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {:<24} FAIL  {detail} [{secs:.1}s]", c.id, c.name);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn unit_quat(rng: &mut ChaCha8Rng) -> Quaternion<f64> {
    loop {
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.1 && n < 1.0 {
            return q / n;
        }
    }
}

// ---------------------------------------------------------------- 1

/// Rotation matrix of a unit `(w, x, y, z)` quaternion.
fn quat_matrix(q: &Quaternion<f64>) -> [[f64; 3]; 3] {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Per-point sum with the Mahalanobis form written through the rotated
/// frame: `dᵀ Σ⁻¹ d = Σₖ ((Rᵀ d)ₖ / sₖ)²`.
fn brute_field(points: &[GaussianPoint], x: &Vector3<f64>) -> [f64; 3] {
    let mut out = [0.0; 3];
    for p in points {
        let r = quat_matrix(&p.rotation);
        let d = [x[0] - p.position[0], x[1] - p.position[1], x[2] - p.position[2]];
        let mut m = 0.0;
        for k in 0..3 {
            let local = r[0][k] * d[0] + r[1][k] * d[1] + r[2][k] * d[2];
            m += (local / p.scale[k]) * (local / p.scale[k]);
        }
        let w = p.opacity * (-0.5 * m).exp();
        for c in 0..3 {
            out[c] += w * p.color[c];
        }
    }
    out
}

fn field_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut queries = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=32);
        let points: Vec<GaussianPoint> = (0..n)
            .map(|i| {
                GaussianPoint::new(
                    i as u64,
                    Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                    Vector3::from_fn(|_, _| rng.random_range(0.05..0.8)),
                    unit_quat(&mut rng),
                    rng.random_range(0.01..1.0),
                    Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
                )
                .unwrap()
            })
            .collect();
        let cloud = GaussianCloud::new("c", points.clone(), true).map_err(|e| e.to_string())?;
        for _ in 0..4 {
            let x = Vector3::from_fn(|_, _| rng.random_range(-1.2..1.2));
            let got = eval_field(&cloud, &x).map_err(|e| e.to_string())?;
            let want = brute_field(&points, &x);
            for c in 0..3 {
                let rel = (got[c] - want[c]).abs() / want[c].abs().max(f64::MIN_POSITIVE);
                if want[c] != 0.0 || got[c] != 0.0 {
                    worst = worst.max(rel);
                }
            }
            queries += 1;
        }
    }
    ensure!(worst <= 1e-12, "worst relative error {worst:.3e}");
    Ok(format!("{queries} queries, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

fn kinematics_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let eta: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let phi: [f64; 3] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let w: [f64; 3] = std::array::from_fn(|_| rng.random_range(-4.0..4.0));
        let mut program = TimelineProgram::stationary(&["x"], 16);
        let track = &mut program.objects[0];
        track.init_pos = eta;
        track.init_angle = phi;
        track.velocity = vec![RateSegment { start: 0.0, end: 1.0, rate: v }];
        track.angular = vec![RateSegment { start: 0.0, end: 1.0, rate: w }];
        for k in 0..64 {
            let t = k as f64 / 63.0;
            let pose = object_pose(&program, 0, t).map_err(|e| e.to_string())?;
            for c in 0..3 {
                worst = worst.max((pose.translation[c] - (eta[c] + v[c] * t)).abs());
                worst = worst.max((pose.angles[c] - (phi[c] + w[c] * t)).abs());
            }
        }
    }
    ensure!(worst <= 1e-12, "single segment error {worst:.3e}");

    // Plans in per-frame units and degrees, F = 16, with hand-integrated values.
    let d = std::f64::consts::PI / 180.0;
    let cases: [(&str, f64, [f64; 3], [f64; 3]); 5] = [
        // 0.05/frame until 0.5, then still: x = -1 + 0.8 · 0.5
        (
            r#"{"init_pos":[[-1,0,0]],"move_list":[[[0.05,0,0],[0,0,0]]],"move_time":[[0.5]],"init_angle":[[0,0,0]],"rotations":[[]],"rotations_time":[[]],"trans_list":[],"trans_period":[]}"#,
            0.75,
            [-0.6, 0.0, 0.0],
            [0.0, 0.0, 0.0],
        ),
        // three segments: 0.8·0.25 + 1.6·0.5 − 0.8·0.1
        (
            r#"{"init_pos":[[0,1,0]],"move_list":[[[0,0.05,0],[0,0.1,0],[0,-0.05,0]]],"move_time":[[0.25,0.75]],"init_angle":[[0,0,0]],"rotations":[[]],"rotations_time":[[]],"trans_list":[],"trans_period":[]}"#,
            0.85,
            [0.0, 1.0 + 0.2 + 0.8 - 0.08, 0.0],
            [0.0, 0.0, 0.0],
        ),
        // rotation window [0.5, 1], 5.625°/frame = 90°/unit time, at t = 0.7
        (
            r#"{"init_pos":[[0,0,0]],"move_list":[[[0,0,0]]],"move_time":[[]],"init_angle":[[0,0,30]],"rotations":[[[0,5.625,0]]],"rotations_time":[[[0.5,1]]],"trans_list":[],"trans_period":[]}"#,
            0.7,
            [0.0, 0.0, 0.0],
            [0.0, 18.0 * d, 30.0 * d],
        ),
        // overlapping windows add: 16·1·0.6 + 16·2·0.2 degrees about x
        (
            r#"{"init_pos":[[0.5,0.5,0.5]],"move_list":[[[0.01,0.02,-0.03]]],"move_time":[[]],"init_angle":[[10,0,0]],"rotations":[[[1,0,0],[2,0,0]]],"rotations_time":[[[0,0.6],[0.4,1]]],"trans_list":[],"trans_period":[]}"#,
            0.6,
            [0.5 + 0.16 * 0.6, 0.5 + 0.32 * 0.6, 0.5 - 0.48 * 0.6],
            [(10.0 + 9.6 + 6.4) * d, 0.0, 0.0],
        ),
        // end of timeline with two velocity segments and a full rotation window
        (
            r#"{"init_pos":[[0,0,-2]],"move_list":[[[0,0,0.125],[0.0625,0,0]]],"move_time":[[0.5]],"init_angle":[[0,-45,0]],"rotations":[[[0,0,-2.8125]]],"rotations_time":[[[0,1]]],"trans_list":[],"trans_period":[]}"#,
            1.0,
            [0.5, 0.0, -1.0],
            [0.0, -45.0 * d, -45.0 * d],
        ),
    ];
    let mut seg_worst: f64 = 0.0;
    for (k, (traj, t, pos, ang)) in cases.iter().enumerate() {
        let text = format!(r#"{{"sample":{{"obj_prompt":["thing"],"TrajParams":{traj}}}}}"#);
        let doc = parse_plan(text.as_bytes()).map_err(|e| format!("fixture {k}: {e}"))?;
        let program = compile_timeline(&doc, 16).map_err(|e| format!("fixture {k}: {e}"))?;
        let pose = object_pose(&program, 0, *t).map_err(|e| e.to_string())?;
        for c in 0..3 {
            let e = (pose.translation[c] - pos[c]).abs().max((pose.angles[c] - ang[c]).abs());
            ensure!(e <= 1e-12, "fixture {k}: position {:?} angles {:?}", pose.translation, pose.angles);
            seg_worst = seg_worst.max(e);
        }
    }
    ensure!(seg_worst <= 1e-12, "multi-segment error {seg_worst:.3e}");
    Ok(format!("single {worst:.1e}, multi-segment {seg_worst:.1e}"))
}

// ---------------------------------------------------------------- 3

const PROBE_BASE: u32 = 1 << 24;
const CLOUD_GROUPS: [&str; 5] = ["means", "quats", "scales", "opacity", "colors"];

struct GradScene {
    scene: Scene,
    /// `[object][group]`
    clouds: Vec<[Matrix; 5]>,
    target: Matrix,
    camera: Camera,
    t: f64,
}

impl GradScene {
    fn loss(&self, tape: &mut Tape, clouds: &[[Matrix; 5]]) -> splat4d_core::neural::Var {
        let vars: Vec<CloudVars> = clouds
            .iter()
            .enumerate()
            .map(|(o, g)| {
                let mut p = |k: usize| tape.param(ParamId(PROBE_BASE + 8 * o as u32 + k as u32), g[k].clone());
                CloudVars {
                    means: p(0),
                    quats: p(1),
                    scales: p(2),
                    opacity: p(3),
                    colors: p(4),
                }
            })
            .collect();
        let frame = frame_on_tape(tape, &self.scene, &vars, self.t, &self.camera).unwrap();
        let target = tape.constant(-&self.target);
        let diff = tape.add(frame.image, target);
        let ss = tape.sum_squares(diff);
        tape.scale(ss, 1.0 / self.target.nrows() as f64)
    }

    fn loss_value(&self, scene: Option<&Scene>, clouds: &[[Matrix; 5]]) -> f64 {
        let mut tape = Tape::new();
        let v = match scene {
            Some(s) => GradScene {
                scene: s.clone(),
                clouds: Vec::new(),
                target: self.target.clone(),
                camera: self.camera,
                t: self.t,
            }
            .loss(&mut tape, clouds),
            None => self.loss(&mut tape, clouds),
        };
        tape.value(v)[[0, 0]]
    }
}

fn gradient_scene() -> GradScene {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let a = make_primitive(PrimitiveKind::Sphere, 25, 5, Vector3::new(0.9, 0.3, 0.2)).unwrap().scaled(0.5);
    let b = make_primitive(PrimitiveKind::Box, 25, 6, Vector3::new(0.2, 0.5, 0.9)).unwrap().scaled(0.4);
    let mut timeline = TimelineProgram::stationary(&["a", "b"], 16);
    timeline.objects[0].init_pos = [-0.3, 0.1, 0.0];
    timeline.objects[0].velocity = vec![RateSegment { start: 0.0, end: 1.0, rate: [0.4, 0.0, -0.2] }];
    timeline.objects[0].angular = vec![RateSegment { start: 0.2, end: 0.8, rate: [0.5, 1.0, -0.3] }];
    timeline.objects[1].init_pos = [0.35, -0.1, 0.1];
    timeline.objects[1].init_angle = [0.2, -0.4, 0.3];
    timeline.transitions.push(TransitionSpan { source: 0, target: 1, start: 0.3, end: 0.6 });
    let shape = NetShape { hidden: vec![8, 8], bands_x: 2, bands_t: 2 };
    let mut nets = SceneNets {
        deform: vec![DeformationNet::with_init(&shape, 11, false), DeformationNet::with_init(&shape, 12, false)],
        transition: vec![TransitionNet::with_init(&shape, 10.0, 13, false).unwrap()],
        shared_transition: false,
    };
    // keep the non-identity deltas and heads moderate
    for (_, m) in nets.tensors_mut() {
        m.mapv_inplace(|v| v * 0.3);
    }
    let camera = Camera::orbit(25.0, 15.0, 2.5, 32, 32).unwrap();
    let mut clouds = Vec::new();
    for cloud in [&a, &b] {
        let pts = cloud.points();
        let n = pts.len();
        let jitter = |rng: &mut ChaCha8Rng, v: f64, s: f64| v * (1.0 + rng.random_range(-s..s));
        clouds.push([
            Matrix::from_shape_fn((n, 3), |(r, c)| pts[r].position[c]),
            Matrix::from_shape_fn((n, 4), |(_, _)| rng.random_range(-1.0..1.0)),
            Matrix::from_shape_fn((n, 3), |(r, c)| jitter(&mut rng, pts[r].scale[c] * 1.5, 0.3)),
            Matrix::from_shape_fn((n, 1), |_| rng.random_range(0.3..0.9)),
            Matrix::from_shape_fn((n, 3), |(r, c)| jitter(&mut rng, pts[r].color[c], 0.2).clamp(0.05, 1.0)),
        ]);
    }
    let scene = Scene::new(vec![a, b], timeline, nets).unwrap();
    let target = Matrix::from_shape_fn((32 * 32, 3), |_| rng.random_range(0.0..0.4));
    GradScene { scene, clouds, target, camera, t: 0.45 }
}

fn gradient_suite() -> Outcome {
    const H: f64 = 1e-4;
    let gs = gradient_scene();
    let mut tape = Tape::new();
    let loss = gs.loss(&mut tape, &gs.clouds);
    let base = tape.value(loss)[[0, 0]];
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;

    // (group name, probe): each probe is a closure-free description
    enum Probe {
        Net(ParamId, usize),
        Cloud(usize, usize, usize),
    }
    let mut groups: Vec<(String, Vec<Probe>)> = Vec::new();
    let tensors = gs.scene.nets.tensors();
    for (name, range) in [("deform", 0..2u32), ("transition", 2..3u32)] {
        let mut probes = Vec::new();
        for (id, m) in &tensors {
            if range.contains(&(id.0 / splat4d_core::neural::SLOT_STRIDE)) {
                probes.extend((0..m.len()).map(|i| Probe::Net(*id, i)));
            }
        }
        groups.push((name.to_string(), probes));
    }
    for (g, name) in CLOUD_GROUPS.iter().enumerate() {
        let mut probes = Vec::new();
        for o in 0..2 {
            probes.extend((0..gs.clouds[o][g].len()).map(|i| Probe::Cloud(o, g, i)));
        }
        groups.push((name.to_string(), probes));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(304);
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    let mut live = 0;
    for k in 0..100 {
        let (name, probes) = &groups[k % groups.len()];
        let probe = &probes[rng.random_range(0..probes.len())];
        let (ad, fd) = match probe {
            Probe::Net(id, i) => {
                let ad = grads.param(*id).map_or(0.0, |g| g.iter().nth(*i).copied().unwrap());
                let eval = |delta: f64| {
                    let mut scene = gs.scene.clone();
                    for (pid, m) in scene.nets.tensors_mut() {
                        if pid == *id {
                            *m.iter_mut().nth(*i).unwrap() += delta;
                        }
                    }
                    gs.loss_value(Some(&scene), &gs.clouds)
                };
                (ad, (eval(H) - eval(-H)) / (2.0 * H))
            }
            Probe::Cloud(o, g, i) => {
                let id = ParamId(PROBE_BASE + 8 * *o as u32 + *g as u32);
                let ad = grads.param(id).map_or(0.0, |m| m.iter().nth(*i).copied().unwrap());
                let eval = |delta: f64| {
                    let mut clouds = gs.clouds.clone();
                    *clouds[*o][*g].iter_mut().nth(*i).unwrap() += delta;
                    gs.loss_value(None, &clouds)
                };
                (ad, (eval(H) - eval(-H)) / (2.0 * H))
            }
        };
        if fd.abs() > 1e-5 {
            live += 1;
        }
        let err = (ad - fd).abs();
        let tol = (1e-3 * fd.abs()).max(1e-5);
        worst = worst.max(err / tol);
        if err > tol {
            failures.push(format!("{name}: ad {ad:.6e} fd {fd:.6e}"));
        }
    }
    ensure!(failures.is_empty(), "{} of 100 probes off: {}", failures.len(), failures.join("; "));
    Ok(format!(
        "100 probes over {} groups ({live} with |g| > 1e-5), loss {base:.4}, worst err/tol {worst:.2e}",
        groups.len()
    ))
}

// ---------------------------------------------------------------- 4

fn render_oracle(clouds: &[GaussianCloud], timeline: &TimelineProgram, cam: &Camera, visible: impl Fn(usize, f64) -> bool) -> FrameBatch {
    let times = frame_times(timeline.frame_count);
    let images = times
        .iter()
        .map(|&t| {
            let world = clouds
                .iter()
                .enumerate()
                .map(|(o, c)| transform_cloud(c, &object_pose(timeline, o, t).unwrap()))
                .collect();
            let mut snap = SceneSnapshot::ungated(t, world);
            for (o, eff) in snap.effective_opacity.iter_mut().enumerate() {
                if !visible(o, t) {
                    eff.iter_mut().for_each(|a| *a = 0.0);
                }
            }
            render_frame(&snap, cam).unwrap()
        })
        .collect();
    FrameBatch {
        images,
        times: times.clone(),
        cameras: vec![*cam; times.len()],
    }
}

/// Fraction of points whose probability crosses 0.5 in the given direction
/// between adjacent samples of `grid`.
fn crossing_fraction(probs: &[Vec<f64>], falling: bool) -> f64 {
    let n = probs[0].len();
    let hits = (0..n)
        .filter(|&i| {
            probs.windows(2).any(|w| {
                let (p0, p1) = (w[0][i], w[1][i]);
                if falling {
                    p0 >= 0.5 && p1 < 0.5
                } else {
                    p0 < 0.5 && p1 >= 0.5
                }
            })
        })
        .count();
    hits as f64 / n as f64
}

fn transition_learning() -> Outcome {
    let a = make_primitive(PrimitiveKind::Sphere, 500, 11, Vector3::new(0.9, 0.1, 0.1)).unwrap().scaled(0.35);
    let b = make_primitive(PrimitiveKind::Box, 500, 12, Vector3::new(0.1, 0.2, 0.9)).unwrap().scaled(0.2);
    let mut timeline = TimelineProgram::stationary(&["a red sphere", "a blue box"], 16);
    timeline.objects[0].init_pos = [-0.45, 0.0, 0.0];
    timeline.objects[1].init_pos = [0.45, 0.0, 0.0];
    timeline.transitions.push(TransitionSpan { source: 0, target: 1, start: 0.4, end: 0.6 });
    let clouds = [a.clone(), b.clone()];
    let batches = [0.0, 90.0, 180.0, 270.0]
        .iter()
        .map(|az| {
            let cam = Camera::orbit(*az, 15.0, 3.0, 32, 32).unwrap();
            render_oracle(&clouds, &timeline, &cam, |o, t| (o == 0) == (t < 0.5))
        })
        .collect();
    let guidance = ReconstructionGuidance::new(batches).map_err(|e| e.to_string())?;
    let shape = NetShape { hidden: vec![32, 32], bands_x: 4, bands_t: 4 };
    let nets = SceneNets::new(2, 1, false, &shape, 10.0, 5).unwrap();
    let scene = Scene::new(vec![a, b], timeline, nets).map_err(|e| e.to_string())?;
    let mut config = TrainConfig::dynamics(1000, 3);
    config.fixed_points = Some(500);
    let mut trainer = Trainer::new(scene, &guidance, config).map_err(|e| e.to_string())?;
    trainer.run().map_err(|e| e.to_string())?;

    let grid: Vec<f64> = (0..=30).map(|k| 0.35 + 0.01 * k as f64).collect();
    let mut per_object: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for &t in &grid {
        let state = evaluate(trainer.scene(), t).map_err(|e| e.to_string())?;
        per_object[0].push(state.prob[0].clone());
        per_object[1].push(state.prob[1].clone());
    }
    let fa = crossing_fraction(&per_object[0], true);
    let fb = crossing_fraction(&per_object[1], false);
    let history = &trainer.state().history;
    let head: f64 = history[..50].iter().map(|r| r.loss).sum::<f64>() / 50.0;
    let tail: f64 = history[history.len() - 50..].iter().map(|r| r.loss).sum::<f64>() / 50.0;
    let detail = format!(
        "1000 steps, A falling {:.1}%, B rising {:.1}%, loss {head:.2e} -> {tail:.2e}",
        100.0 * fa,
        100.0 * fb
    );
    ensure!(fa >= 0.9 && fb >= 0.9, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 5

fn gating_statistics() -> Outcome {
    let cloud = make_primitive(PrimitiveKind::Sphere, 10_000, 1, Vector3::repeat(0.5)).unwrap();
    let p = vec![0.3; cloud.len()];
    let mut fractions = Vec::new();
    for (seed, frame) in [(0, 0), (1, 5), (7, 15)] {
        let mask = gate_infer(&cloud, 0, &p, GateMode::new(GateKind::Bernoulli, seed), frame).map_err(|e| e.to_string())?;
        let f = mask.iter().filter(|v| **v).count() as f64 / mask.len() as f64;
        ensure!((0.28..=0.32).contains(&f), "bernoulli fraction {f} (seed {seed}, frame {frame})");
        fractions.push(format!("{f:.4}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let offsets: Vec<f64> = (0..cloud.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
    let slopes: Vec<f64> = (0..cloud.len()).map(|_| rng.random_range(0.0..2.0)).collect();
    let times = frame_times(16);
    let count_flickers = |kind: GateKind| -> Result<usize, String> {
        let masks: Vec<Vec<bool>> = times
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let p: Vec<f64> = offsets.iter().zip(&slopes).map(|(o, s)| (o + s * t).clamp(0.0, 1.0)).collect();
                gate_infer(&cloud, 0, &p, GateMode::new(kind, 9), k as u64).map_err(|e| e.to_string())
            })
            .collect::<Result<_, _>>()?;
        Ok((0..cloud.len())
            .filter(|&i| {
                let mut gone = false;
                let mut seen = false;
                for m in &masks {
                    if m[i] && gone {
                        return true;
                    }
                    if m[i] {
                        seen = true;
                    } else if seen {
                        gone = true;
                    }
                }
                false
            })
            .count())
    };
    let threshold = count_flickers(GateKind::Threshold)?;
    let bernoulli = count_flickers(GateKind::Bernoulli)?;
    ensure!(threshold == 0, "threshold mode produced {threshold} disappear-then-reappear events");
    Ok(format!(
        "bernoulli fractions [{}]; threshold events 0 (bernoulli {bernoulli})",
        fractions.join(", ")
    ))
}

// ---------------------------------------------------------------- 6

fn small_pair(points: usize) -> (Vec<GaussianCloud>, TimelineProgram) {
    let a = make_primitive(PrimitiveKind::Sphere, points, 21, Vector3::new(0.9, 0.6, 0.1)).unwrap().scaled(0.3);
    let b = make_primitive(PrimitiveKind::Torus, points, 22, Vector3::new(0.2, 0.8, 0.3)).unwrap().scaled(0.4);
    let mut timeline = TimelineProgram::stationary(&["a", "b"], 8);
    timeline.objects[0].init_pos = [-0.4, 0.0, 0.0];
    timeline.objects[0].velocity = vec![RateSegment { start: 0.0, end: 1.0, rate: [0.5, 0.0, 0.0] }];
    timeline.objects[1].init_pos = [0.4, 0.0, 0.0];
    timeline.transitions.push(TransitionSpan { source: 0, target: 1, start: 0.4, end: 0.6 });
    (vec![a, b], timeline)
}

fn phase_invariants() -> Outcome {
    const FIXED: usize = 60;
    let (clouds, timeline) = small_pair(FIXED);
    let batches = [0.0, 120.0, 240.0]
        .iter()
        .map(|az| render_oracle(&clouds, &timeline, &Camera::orbit(*az, 15.0, 3.0, 24, 24).unwrap(), |o, t| (o == 0) == (t < 0.5)))
        .collect();
    let guidance = ReconstructionGuidance::new(batches).map_err(|e| e.to_string())?;
    let shape = NetShape { hidden: vec![16, 16], bands_x: 2, bands_t: 2 };
    let nets = SceneNets::new(2, 1, false, &shape, 10.0, 1).unwrap();
    let scene = Scene::new(clouds.clone(), timeline, nets).map_err(|e| e.to_string())?;

    let mut config = TrainConfig::dynamics(40, 2);
    config.fixed_points = Some(FIXED);
    let mut dynamics = Trainer::new(scene, &guidance, config).map_err(|e| e.to_string())?;
    let nets_before = dynamics.scene().nets.fingerprint();
    for step in 0..40 {
        dynamics.step().map_err(|e| e.to_string())?;
        ensure!(dynamics.scene().point_counts() == vec![FIXED; 2], "phase A step {step}: point counts changed");
        ensure!(dynamics.scene().objects == clouds, "phase A step {step}: clouds changed");
    }
    let peak = dynamics.state().peak_points;
    ensure!(peak <= FIXED * 2, "phase A peak point count {peak} > {}", FIXED * 2);
    ensure!(dynamics.scene().nets.fingerprint() != nets_before, "phase A did not update the networks");

    let trained = dynamics.into_scene();
    let nets_trained = trained.nets.fingerprint();
    let mut config = TrainConfig::refine(40, 2);
    config.densify = DensifyConfig {
        interval: 10,
        grad_threshold: 1e-7,
        ..DensifyConfig::default()
    };
    let mut refine = Trainer::new(trained, &guidance, config).map_err(|e| e.to_string())?;
    for step in 0..40 {
        refine.step().map_err(|e| e.to_string())?;
        ensure!(refine.scene().nets.fingerprint() == nets_trained, "phase B step {step}: networks changed");
    }
    let counts = refine.scene().point_counts();
    ensure!(counts != vec![FIXED; 2], "phase B never densified");
    Ok(format!("phase A {FIXED}x2 points for 40 steps, peak {peak}; phase B nets frozen, counts {counts:?}"))
}

// ---------------------------------------------------------------- 7

fn mean_psnr(scene: &Scene, targets: &[Image], cams: &[Camera]) -> Result<f64, String> {
    let mut sum = 0.0;
    for (img, cam) in targets.iter().zip(cams) {
        let snap = SceneSnapshot::ungated(0.0, scene.objects.clone());
        let pred = render_frame(&snap, cam).map_err(|e| e.to_string())?;
        sum += psnr(&pred, img).map_err(|e| e.to_string())?;
    }
    Ok(sum / targets.len() as f64)
}

fn refinement_quality() -> Outcome {
    let tint = |x: &Vector3<f64>| Vector3::new(0.5 + 0.45 * x.x, 0.5 + 0.45 * x.y, 0.5 - 0.45 * x.z);
    let target = make_primitive(PrimitiveKind::Sphere, 2000, 71, Vector3::repeat(1.0)).unwrap().recolored(tint).scaled(0.6);
    let start = make_primitive(PrimitiveKind::Sphere, 200, 72, Vector3::repeat(0.5)).unwrap().scaled(0.6);
    let timeline = TimelineProgram::stationary(&["a sphere"], 1);
    let shape = NetShape { hidden: vec![8], bands_x: 1, bands_t: 1 };
    let nets = SceneNets::new(1, 0, false, &shape, 10.0, 0).unwrap();
    let base = Camera::orbit(0.0, 15.0, 2.5, 64, 64).unwrap();
    let train_views: Vec<Camera> = (0..12)
        .map(|k| Camera::orbit(-165.0 + 30.0 * k as f64, if k % 2 == 0 { 25.0 } else { -5.0 }, 2.5, 64, 64).unwrap())
        .collect();
    let batches = train_views
        .iter()
        .map(|cam| render_oracle(std::slice::from_ref(&target), &timeline, cam, |_, _| true))
        .collect();
    let guidance = ReconstructionGuidance::new(batches).map_err(|e| e.to_string())?;
    let eval_cams = base.eval_orbit();
    let eval_targets: Vec<Image> = eval_cams
        .iter()
        .map(|cam| render_frame(&SceneSnapshot::ungated(0.0, vec![target.clone()]), cam).unwrap())
        .collect();

    let scene = Scene::new(vec![start], timeline, nets).map_err(|e| e.to_string())?;
    let before = mean_psnr(&scene, &eval_targets, &eval_cams)?;
    let mut config = TrainConfig::refine(1000, 7);
    config.densify.max_points = 4000;
    let mut trainer = Trainer::new(scene, &guidance, config).map_err(|e| e.to_string())?;
    trainer.run().map_err(|e| e.to_string())?;
    let after = mean_psnr(trainer.scene(), &eval_targets, &eval_cams)?;
    let detail = format!(
        "PSNR {before:.2} -> {after:.2} dB (+{:.2}), {} points",
        after - before,
        trainer.scene().objects[0].len()
    );
    ensure!(after - before >= 5.0, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn plan_toolchain() -> Outcome {
    let plans = fixtures().join("plans");
    for name in ["missile_plane_explosion.json", "missile_cloud.json"] {
        let doc = parse_plan(&std::fs::read(plans.join(name)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let report = validate_plan(&doc);
        ensure!(report.findings.is_empty(), "{name}: {report}");
        compile_timeline(&doc, 16).map_err(|e| format!("{name}: {e}"))?;
    }
    let missile = parse_plan(&std::fs::read(plans.join("missile_plane_explosion.json")).unwrap()).unwrap();
    ensure!(missile.object_count() == 3, "missile plan has {} objects", missile.object_count());
    ensure!(missile.transition_pairs().len() == 1, "missile plan has {} pairs", missile.transition_pairs().len());

    let dir = plans.join("mutations");
    let expected: BTreeMap<String, String> =
        serde_json::from_slice(&std::fs::read(dir.join("expected.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure!(expected.len() == 12, "{} mutation fixtures", expected.len());
    for (name, code) in &expected {
        let doc = parse_plan(&std::fs::read(dir.join(format!("{name}.json"))).unwrap()).map_err(|e| format!("{name}: {e}"))?;
        let codes: Vec<String> = validate_plan(&doc).codes().iter().map(|c| c.to_string()).collect();
        ensure!(codes == vec![code.clone()], "{name}: expected [{code}], got {codes:?}");
    }
    Ok("2 plans clean, 12 mutations each yield their code".into())
}

// ---------------------------------------------------------------- 9

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_splat4d")).args(args).output().map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "splat4d {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn same_files(a: &Path, b: &Path, names: &[String]) -> Result<(), String> {
    for n in names {
        let x = std::fs::read(a.join(n)).map_err(|e| format!("{n}: {e}"))?;
        let y = std::fs::read(b.join(n)).map_err(|e| format!("{n}: {e}"))?;
        ensure!(x == y, "{n} differs");
    }
    Ok(())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let manifest = root.join("scene.toml");
    std::fs::write(
        &manifest,
        format!(
            r#"plan = "{}"
frame_count = 16

[gate]
mode = "bernoulli"
seed = 3

[camera]
radius = 3.5
width = 48
height = 48

[net]
hidden = [16]
bands_x = 2
bands_t = 2

[[objects]]
label = "missile"
primitive = {{ kind = "box", points = 120, seed = 1, color = [0.8, 0.8, 0.8], scale = 0.1 }}

[[objects]]
label = "plane"
primitive = {{ kind = "disk", points = 150, seed = 2, color = [0.3, 0.4, 0.9], scale = 0.3 }}

[[objects]]
label = "explosion"
primitive = {{ kind = "sphere", points = 150, seed = 3, color = [1.0, 0.5, 0.1], scale = 0.3 }}
"#,
            fixtures().join("plans/missile_plane_explosion.json").display()
        ),
    )
    .unwrap();
    let m = manifest.to_str().unwrap();
    let (r1, r2) = (root.join("r1"), root.join("r2"));
    for r in [&r1, &r2] {
        cli(&["render", m, "--out", r.to_str().unwrap()])?;
    }
    let pngs: Vec<String> = (0..16).map(|k| format!("frame_{k:04}.png")).collect();
    same_files(&r1, &r2, &pngs)?;

    let target = root.join("target");
    cli(&["render", m, "--camera", "40,15,3.5", "--pfm", "--out", target.to_str().unwrap()])?;
    let t = target.to_str().unwrap();
    let straight = root.join("straight");
    let resumed = root.join("resumed");
    let base = ["train", m, "--target", t, "--steps", "12", "--seed", "5", "--checkpoint-every", "5"];
    let mut names = Vec::new();
    for phase in ["dynamics", "refine"] {
        let s_out = straight.join(phase);
        let r_out = resumed.join(phase);
        let mut args = base.to_vec();
        args.extend(["--phase", phase, "--densify-interval", "4", "--out", s_out.to_str().unwrap()]);
        cli(&args)?;
        let ckpt = s_out.join("checkpoints/step_000005");
        let mut args = base.to_vec();
        args.extend(["--phase", phase, "--densify-interval", "4", "--out", r_out.to_str().unwrap()]);
        args.extend(["--resume", ckpt.to_str().unwrap()]);
        cli(&args)?;
        let files: Vec<String> = std::fs::read_dir(s_out.join("final"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        same_files(&s_out.join("final"), &r_out.join("final"), &files)?;
        names.push(format!("{phase} {}", files.len()));
    }
    Ok(format!("16 PNGs identical; resumed runs identical ({} files)", names.join(", ")))
}

// ---------------------------------------------------------------- 10

fn euler(angles: [f64; 3]) -> Matrix3<f64> {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

fn identity_init() -> Outcome {
    let doc = parse_plan(&std::fs::read(fixtures().join("plans/missile_plane_explosion.json")).unwrap()).map_err(|e| e.to_string())?;
    let timeline = compile_timeline(&doc, 16).map_err(|e| e.to_string())?;
    let kinds = [PrimitiveKind::Box, PrimitiveKind::Disk, PrimitiveKind::Sphere];
    let clouds: Vec<GaussianCloud> = kinds
        .iter()
        .enumerate()
        .map(|(i, k)| make_primitive(*k, 300, i as u64, Vector3::repeat(0.7)).unwrap().scaled(0.3))
        .collect();
    let nets = SceneNets::new(3, timeline.transitions.len(), false, &NetShape::default(), 10.0, 42).unwrap();
    let scene = Scene::new(clouds.clone(), timeline.clone(), nets).map_err(|e| e.to_string())?;
    let state = evaluate(&scene, 0.0).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (o, (canon, world)) in clouds.iter().zip(&state.world).enumerate() {
        let track = &timeline.objects[o];
        let r = euler(track.init_angle);
        let eta = Vector3::from(track.init_pos);
        let expected: Vec<Vector3<f64>> = canon.points().iter().map(|p| r * p.position + eta).collect();
        for (p, e) in world.points().iter().zip(&expected) {
            worst = worst.max((p.position - e).norm());
        }
        let centroid = expected.iter().sum::<Vector3<f64>>() / expected.len() as f64;
        worst = worst.max((world.centroid() - centroid).norm());
    }
    ensure!(worst <= 1e-6, "largest offset {worst:.3e}");
    Ok(format!("3 objects at t = 0, largest offset {worst:.1e}"))
}
