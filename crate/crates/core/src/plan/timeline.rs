//! Compiled per-object motion programs.

use super::document::{PlanDocument, Vec3};
use super::validate::{validate_plan_with, ValidateOptions, ValidationReport};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TIMELINE_VERSION: u32 = 1;
/// Rotation composition used for every Euler triple: `R = Rz · Ry · Rx`.
pub const EULER_ORDER: &str = "xyz-extrinsic";

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("plan has validation errors:\n{0}")]
    Invalid(ValidationReport),
    #[error("frame count must be at least 1")]
    FrameCount,
    #[error("timeline json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported timeline version {0}")]
    Version(u32),
}

/// A constant rate over `[start, end)`. The last velocity segment also
/// covers `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSegment {
    pub start: f64,
    pub end: f64,
    pub rate: Vec3,
}

impl RateSegment {
    fn covered(&self, t: f64) -> f64 {
        (t.min(self.end) - self.start).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub prompt: String,
    /// Scene units.
    pub init_pos: Vec3,
    /// Radians.
    pub init_angle: Vec3,
    /// Contiguous segments tiling `[0, 1]`; rates in scene units per unit time.
    pub velocity: Vec<RateSegment>,
    /// Possibly overlapping windows whose rates add; radians per unit time.
    pub angular: Vec<RateSegment>,
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scaled(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

impl ObjectTrack {
    pub fn velocity_at(&self, t: f64) -> Vec3 {
        let last = self.velocity.len().saturating_sub(1);
        self.velocity
            .iter()
            .enumerate()
            .find(|(k, s)| s.start <= t && (t < s.end || (*k == last && t <= s.end)))
            .map_or([0.0; 3], |(_, s)| s.rate)
    }

    pub fn angular_rate_at(&self, t: f64) -> Vec3 {
        self.angular
            .iter()
            .filter(|s| s.start <= t && t < s.end)
            .fold([0.0; 3], |acc, s| add(acc, s.rate))
    }

    /// `∫₀ᵗ v(τ) dτ`, exact for piecewise-constant rates.
    pub fn displacement(&self, t: f64) -> Vec3 {
        self.velocity
            .iter()
            .fold([0.0; 3], |acc, s| add(acc, scaled(s.rate, s.covered(t))))
    }

    /// `∫₀ᵗ ϖ(τ) dτ` in radians.
    pub fn angle_change(&self, t: f64) -> Vec3 {
        self.angular
            .iter()
            .fold([0.0; 3], |acc, s| add(acc, scaled(s.rate, s.covered(t))))
    }

    pub fn position_at(&self, t: f64) -> Vec3 {
        add(self.init_pos, self.displacement(t))
    }

    pub fn angles_at(&self, t: f64) -> Vec3 {
        add(self.init_angle, self.angle_change(t))
    }

    /// Largest speed over all segments, for continuity bounds.
    pub fn max_speed(&self) -> f64 {
        let norm = |v: &Vec3| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        self.velocity.iter().map(|s| norm(&s.rate)).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionSpan {
    pub source: usize,
    pub target: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineProgram {
    pub version: u32,
    pub frame_count: usize,
    pub euler_order: String,
    pub objects: Vec<ObjectTrack>,
    pub transitions: Vec<TransitionSpan>,
}

impl TimelineProgram {
    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    /// Indices of transitions that involve `object`.
    pub fn transitions_of(&self, object: usize) -> Vec<usize> {
        self.transitions
            .iter()
            .enumerate()
            .filter(|(_, s)| s.source == object || s.target == object)
            .map(|(k, _)| k)
            .collect()
    }

    /// A program where every object sits still at the origin.
    pub fn stationary(prompts: &[&str], frame_count: usize) -> Self {
        Self {
            version: TIMELINE_VERSION,
            frame_count,
            euler_order: EULER_ORDER.to_string(),
            objects: prompts
                .iter()
                .map(|p| ObjectTrack {
                    prompt: p.to_string(),
                    init_pos: [0.0; 3],
                    init_angle: [0.0; 3],
                    velocity: Vec::new(),
                    angular: Vec::new(),
                })
                .collect(),
            transitions: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("timeline serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CompileError> {
        let program: Self = serde_json::from_str(text)?;
        if program.version != TIMELINE_VERSION {
            return Err(CompileError::Version(program.version));
        }
        Ok(program)
    }
}

/// Builds one object's track, or `None` when its lists are missing or
/// inconsistent.
pub(crate) fn object_track(
    doc: &PlanDocument,
    i: usize,
    frame_rate: f64,
    lenient: bool,
) -> Option<ObjectTrack> {
    let init_pos = *doc.init_pos.get(i)?;
    let init_angle = *doc.init_angle.get(i)?;
    let segments = doc.move_list.get(i)?;
    let times = doc.move_time.get(i)?;
    let rotations = doc.rotations.get(i)?;
    let windows = doc.rotations_time.get(i)?;
    if rotations.len() != windows.len() {
        return None;
    }

    let velocity = if segments.is_empty() && times.is_empty() {
        Vec::new()
    } else {
        let expected = times.len() + 1;
        if segments.len() > expected || (segments.len() < expected && !lenient) {
            return None;
        }
        let mut bounds = Vec::with_capacity(expected + 1);
        bounds.push(0.0);
        bounds.extend(times.iter().copied());
        bounds.push(1.0);
        (0..expected)
            .map(|k| RateSegment {
                start: bounds[k],
                end: bounds[k + 1],
                rate: segments.get(k).map_or([0.0; 3], |v| scaled(*v, frame_rate)),
            })
            .collect()
    };

    let angular = rotations
        .iter()
        .zip(windows)
        .map(|(rate, [start, end])| RateSegment {
            start: *start,
            end: *end,
            rate: scaled(*rate, frame_rate.to_radians()),
        })
        .collect();

    Some(ObjectTrack {
        prompt: doc.obj_prompt[i].clone(),
        init_pos,
        init_angle: init_angle.map(f64::to_radians),
        velocity,
        angular,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompileOptions {
    pub frame_count: usize,
    pub lenient: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self {
            frame_count: super::DEFAULT_FRAME_COUNT,
            lenient: false,
        }
    }
}

/// Compiles a validated plan. Per-frame vectors become per-unit-time rates
/// by multiplying with `frame_count`; degrees become radians.
pub fn compile_timeline(doc: &PlanDocument, frame_count: usize) -> Result<TimelineProgram, CompileError> {
    compile_timeline_with(
        doc,
        CompileOptions {
            frame_count,
            lenient: false,
        },
    )
}

pub fn compile_timeline_with(
    doc: &PlanDocument,
    options: CompileOptions,
) -> Result<TimelineProgram, CompileError> {
    if options.frame_count == 0 {
        return Err(CompileError::FrameCount);
    }
    let report = validate_plan_with(
        doc,
        ValidateOptions {
            lenient: options.lenient,
            frame_count: options.frame_count,
        },
    );
    if report.has_errors() {
        return Err(CompileError::Invalid(report));
    }
    let frame_rate = options.frame_count as f64;
    let objects = (0..doc.object_count())
        .map(|i| {
            object_track(doc, i, frame_rate, options.lenient)
                .expect("validated plans produce tracks")
        })
        .collect();
    let transitions = doc
        .trans_list
        .iter()
        .zip(&doc.trans_period)
        .map(|([source, target], [start, end])| TransitionSpan {
            source: *source,
            target: *target,
            start: *start,
            end: *end,
        })
        .collect();
    Ok(TimelineProgram {
        version: TIMELINE_VERSION,
        frame_count: options.frame_count,
        euler_order: EULER_ORDER.to_string(),
        objects,
        transitions,
    })
}
