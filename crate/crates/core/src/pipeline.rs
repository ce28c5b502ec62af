//! Scene evaluation at a given time: planned pose, learned deformation,
//! transition probability, gating and rendering.
//!
//! Per object `i` and time `t`, a canonical point `(x, q)` becomes
//! `x_t = x + Δx`, `q_t = normalize(q + Δq)`; its transition probability is
//! the product of `p_k(x_t, q_t, t)` over the pairs `k` that involve `i`
//! (1 when there are none); and its world pose is `R x_t + T`, `q_pose ⊗ q_t`.

use crate::gate::{gate_infer, GateError, GateKind, GateMode};
use crate::kinematics::{object_pose, KinematicsError, Pose};
use crate::neural::{Matrix, SceneNets, Tape, Var};
use crate::plan::TimelineProgram;
use crate::render::{render_frame, render_on_tape, Camera, Image, RenderError, SplatKey, SplatVars};
use crate::scene::{GaussianCloud, GaussianPoint, SceneSnapshot};
use nalgebra::{Matrix4, Quaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("scene has {clouds} clouds but the timeline has {tracks} objects")]
    ObjectCount { clouds: usize, tracks: usize },
    #[error("networks do not match the scene: {0}")]
    Nets(String),
    #[error("object {0} is not canonical")]
    NotCanonical(usize),
    #[error("frame count must be at least 1")]
    FrameCount,
    #[error("expected 1 or {frames} cameras, got {cameras}")]
    Cameras { frames: usize, cameras: usize },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Canonical object clouds, their motion program and the networks.
#[derive(Debug, Clone)]
pub struct Scene {
    pub objects: Vec<GaussianCloud>,
    pub timeline: TimelineProgram,
    pub nets: SceneNets,
}

impl Scene {
    pub fn new(objects: Vec<GaussianCloud>, timeline: TimelineProgram, nets: SceneNets) -> Result<Self, PipelineError> {
        let scene = Self {
            objects,
            timeline,
            nets,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.objects.len() != self.timeline.objects.len() {
            return Err(PipelineError::ObjectCount {
                clouds: self.objects.len(),
                tracks: self.timeline.objects.len(),
            });
        }
        if let Some(i) = self.objects.iter().position(|c| !c.is_canonical()) {
            return Err(PipelineError::NotCanonical(i));
        }
        if self.nets.deform.len() != self.objects.len() {
            return Err(PipelineError::Nets(format!(
                "{} deformation nets for {} objects",
                self.nets.deform.len(),
                self.objects.len()
            )));
        }
        let pairs = self.timeline.transitions.len();
        let expected = if self.nets.shared_transition { pairs.min(1) } else { pairs };
        if self.nets.transition.len() != expected {
            return Err(PipelineError::Nets(format!(
                "{} transition nets for {pairs} pairs",
                self.nets.transition.len()
            )));
        }
        Ok(())
    }

    pub fn point_counts(&self) -> Vec<usize> {
        self.objects.iter().map(GaussianCloud::len).collect()
    }
}

/// `t_k = k / (F − 1)`; a single frame sits at `t = 0`.
pub fn frame_times(frames: usize) -> Vec<f64> {
    match frames {
        0 => Vec::new(),
        1 => vec![0.0],
        f => (0..f).map(|k| k as f64 / (f - 1) as f64).collect(),
    }
}

/// Matrix `L(p)` with `p ⊗ q = L(p) q` for `(w, x, y, z)` column quaternions.
pub fn left_multiplier(p: &Quaternion<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (p.w, p.i, p.j, p.k);
    Matrix4::new(w, -x, -y, -z, x, w, -z, y, y, z, w, -x, z, -y, x, w)
}

/// Tape inputs describing one canonical object.
#[derive(Debug, Clone, Copy)]
pub struct CloudVars {
    /// N×3 canonical positions.
    pub means: Var,
    /// N×4 unit quaternions.
    pub quats: Var,
    /// N×3 positive scales.
    pub scales: Var,
    /// N×1 stored opacity.
    pub opacity: Var,
    /// N×3
    pub colors: Var,
}

/// Plain constants for a cloud's stored parameters.
pub fn constant_cloud(tape: &mut Tape, cloud: &GaussianCloud) -> CloudVars {
    let pts = cloud.points();
    let n = pts.len();
    CloudVars {
        means: tape.constant(Matrix::from_shape_fn((n, 3), |(r, c)| pts[r].position[c])),
        quats: tape.constant(Matrix::from_shape_fn((n, 4), |(r, c)| {
            let q = pts[r].unit_rotation();
            [q.w, q.i, q.j, q.k][c]
        })),
        scales: tape.constant(Matrix::from_shape_fn((n, 3), |(r, c)| pts[r].scale[c])),
        opacity: tape.constant(Matrix::from_shape_fn((n, 1), |(r, _)| pts[r].opacity)),
        colors: tape.constant(Matrix::from_shape_fn((n, 3), |(r, c)| pts[r].color[c])),
    }
}

/// Per-object tape nodes of one scene instant.
#[derive(Debug, Clone)]
pub struct ObjectState {
    /// World positions N×3.
    pub means: Var,
    /// World quaternions N×4.
    pub quats: Var,
    /// Transition probability N×1, `None` when no pair involves the object.
    pub prob: Option<Var>,
}

/// Builds every object's world state at time `t` on the tape.
pub fn states_on_tape(
    tape: &mut Tape,
    scene: &Scene,
    clouds: &[CloudVars],
    t: f64,
) -> Result<Vec<ObjectState>, PipelineError> {
    let mut out = Vec::with_capacity(clouds.len());
    for (i, cv) in clouds.iter().enumerate() {
        let n = tape.value(cv.means).nrows();
        let tcol = tape.constant(Matrix::from_elem((n, 1), t));
        let (dx, dq) = scene.nets.deform[i].forward(tape, cv.means, cv.quats, tcol, scene.nets.deform_slot(i));
        let x_t = tape.add(cv.means, dx);
        let q_sum = tape.add(cv.quats, dq);
        let q_t = tape.normalize_rows(q_sum);

        let mut prob: Option<Var> = None;
        for k in scene.timeline.transitions_of(i) {
            let net = scene.nets.transition_for(k);
            let p = net.forward(tape, x_t, q_t, tcol, scene.nets.transition_slot(k));
            prob = Some(match prob {
                Some(acc) => tape.mul(acc, p),
                None => p,
            });
        }

        let pose = object_pose(&scene.timeline, i, t)?;
        let rt = tape.constant(Matrix::from_shape_fn((3, 3), |(r, c)| pose.rotation[(c, r)]));
        let rotated = tape.matmul(x_t, rt);
        let shift = tape.constant(Matrix::from_shape_fn((1, 3), |(_, c)| pose.translation[c]));
        let means = tape.add_row(rotated, shift);
        let l = left_multiplier(pose.quaternion().quaternion());
        let lt = tape.constant(Matrix::from_shape_fn((4, 4), |(r, c)| l[(c, r)]));
        let quats = tape.matmul(q_t, lt);
        out.push(ObjectState { means, quats, prob });
    }
    Ok(out)
}

fn keys_of(scene: &Scene) -> Vec<SplatKey> {
    scene
        .objects
        .iter()
        .enumerate()
        .flat_map(|(o, c)| {
            c.points().iter().map(move |p| SplatKey {
                object: o as u32,
                point_id: p.point_id,
            })
        })
        .collect()
}

/// Tape nodes of one differentiable frame.
#[derive(Debug, Clone)]
pub struct FrameVars {
    /// `(H·W)×3` image.
    pub image: Var,
    /// Per object transition probabilities, as in [`ObjectState::prob`].
    pub probs: Vec<Option<Var>>,
}

/// Differentiable render of time `t` with train-mode gating (`α · p`).
pub fn frame_on_tape(
    tape: &mut Tape,
    scene: &Scene,
    clouds: &[CloudVars],
    t: f64,
    camera: &Camera,
) -> Result<FrameVars, PipelineError> {
    camera.validate()?;
    let states = states_on_tape(tape, scene, clouds, t)?;
    let mut means = Vec::new();
    let mut quats = Vec::new();
    let mut scales = Vec::new();
    let mut opacity = Vec::new();
    let mut colors = Vec::new();
    for (cv, st) in clouds.iter().zip(&states) {
        means.push(st.means);
        quats.push(st.quats);
        scales.push(cv.scales);
        colors.push(cv.colors);
        opacity.push(match st.prob {
            Some(p) => tape.mul(cv.opacity, p),
            None => cv.opacity,
        });
    }
    let vars = SplatVars {
        means: tape.concat_rows(&means),
        quats: tape.concat_rows(&quats),
        scales: tape.concat_rows(&scales),
        opacity: tape.concat_rows(&opacity),
        colors: tape.concat_rows(&colors),
    };
    Ok(FrameVars {
        image: render_on_tape(tape, vars, keys_of(scene), camera),
        probs: states.iter().map(|s| s.prob).collect(),
    })
}

/// Evaluated state of every object at time `t`.
#[derive(Debug, Clone)]
pub struct SceneState {
    pub time: f64,
    /// World-space clouds.
    pub world: Vec<GaussianCloud>,
    /// Per object, per point transition probability (1 without transitions).
    pub prob: Vec<Vec<f64>>,
    pub poses: Vec<Pose>,
}

pub fn evaluate(scene: &Scene, t: f64) -> Result<SceneState, PipelineError> {
    let mut tape = Tape::new();
    let clouds: Vec<_> = scene.objects.iter().map(|c| constant_cloud(&mut tape, c)).collect();
    let states = states_on_tape(&mut tape, scene, &clouds, t)?;
    let mut world = Vec::new();
    let mut prob = Vec::new();
    let mut poses = Vec::new();
    for (i, (cloud, st)) in scene.objects.iter().zip(&states).enumerate() {
        let m = tape.value(st.means);
        let q = tape.value(st.quats);
        let points = cloud
            .points()
            .iter()
            .enumerate()
            .map(|(r, p)| GaussianPoint {
                position: Vector3::new(m[[r, 0]], m[[r, 1]], m[[r, 2]]),
                rotation: Quaternion::new(q[[r, 0]], q[[r, 1]], q[[r, 2]], q[[r, 3]]),
                ..p.clone()
            })
            .collect();
        world.push(GaussianCloud::new(cloud.label(), points, false).expect("ids unchanged"));
        prob.push(match st.prob {
            Some(p) => tape.value(p).column(0).to_vec(),
            None => vec![1.0; cloud.len()],
        });
        poses.push(object_pose(&scene.timeline, i, t)?);
    }
    Ok(SceneState {
        time: t,
        world,
        prob,
        poses,
    })
}

/// World snapshot at time `t` with inference gating for `frame`.
pub fn snapshot_at(scene: &Scene, t: f64, frame: u64, gate: GateMode) -> Result<SceneSnapshot, PipelineError> {
    let state = evaluate(scene, t)?;
    let mut effective = Vec::with_capacity(state.world.len());
    for (o, (cloud, p)) in state.world.iter().zip(&state.prob).enumerate() {
        effective.push(match gate.kind {
            GateKind::TrainOpacity => crate::gate::gate_train(cloud, p)?,
            _ => gate_infer(cloud, o, p, gate, frame)?
                .into_iter()
                .zip(cloud.points())
                .map(|(keep, pt)| if keep { pt.opacity } else { 0.0 })
                .collect(),
        });
    }
    Ok(SceneSnapshot {
        time: t,
        objects: state.world,
        effective_opacity: effective,
    })
}

/// Rendered frames with their times and cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    pub images: Vec<Image>,
    pub times: Vec<f64>,
    pub cameras: Vec<Camera>,
}

impl FrameBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Renders `frames` uniformly spaced instants. `cameras` holds one camera
/// for all frames or one per frame.
pub fn render_sequence(
    scene: &Scene,
    gate: GateMode,
    cameras: &[Camera],
    frames: usize,
) -> Result<FrameBatch, PipelineError> {
    if frames == 0 {
        return Err(PipelineError::FrameCount);
    }
    if cameras.len() != 1 && cameras.len() != frames {
        return Err(PipelineError::Cameras {
            frames,
            cameras: cameras.len(),
        });
    }
    let times = frame_times(frames);
    let cams: Vec<Camera> = (0..frames).map(|k| cameras[k.min(cameras.len() - 1)]).collect();
    let images = times
        .iter()
        .zip(&cams)
        .enumerate()
        .map(|(k, (t, cam))| Ok(render_frame(&snapshot_at(scene, *t, k as u64, gate)?, cam)?))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(FrameBatch {
        images,
        times,
        cameras: cams,
    })
}
