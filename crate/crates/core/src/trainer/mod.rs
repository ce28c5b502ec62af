//! Two-phase optimization against a pluggable guidance signal.
//!
//! Phase A (`dynamics`) trains the deformation and transition networks with
//! every cloud frozen and the point count fixed. Phase B (`refine`) trains
//! the cloud parameters with the networks frozen, densifying as it goes.

mod adam;
mod densify;
mod guidance;
mod run;

pub use adam::{step_adam, AdamMoments, BETA1, BETA2, EPSILON};
pub use densify::{densify, DensifyConfig, DensifyStats, RawCloud, SPLIT_SHRINK};
pub use guidance::{GuidanceOutput, GuidanceProvider, GuidanceRequest, ReconstructionGuidance, ZeroGuidance};
pub use run::{train_dynamics, train_refine, CloudMoments, LossRecord, TrainOutcome, TrainState, Trainer};

use crate::pipeline::PipelineError;
use crate::scene::SceneError;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const DEFAULT_DYNAMICS_STEPS: usize = 4500;
pub const DEFAULT_REFINE_STEPS: usize = 4000;
pub const DEFAULT_STATIC_STEPS: usize = 5000;
pub const DEFAULT_FIXED_POINTS: usize = 2000;
/// Elevation of the orbit views used while training dynamics, degrees.
pub const TRAIN_ELEVATION: f64 = 15.0;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("guidance: {0}")]
    Guidance(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at step {step}")]
    NonFinite { step: u64 },
    #[error("object {object} has {found} points, expected {expected}")]
    PointCount { object: usize, expected: usize, found: usize },
    #[error("network parameters changed during refinement")]
    FrozenNets,
    #[error("train state: {0}")]
    State(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Dynamics,
    Refine,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dynamics => "dynamics",
            Self::Refine => "refine",
        })
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dynamics" => Ok(Self::Dynamics),
            "refine" => Ok(Self::Refine),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub nets: f64,
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            nets: 1e-3,
            position: 1.6e-4,
            scale: 2.5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: usize,
    pub seed: u64,
    pub lr: LearningRates,
    /// Phase A: every object must have exactly this many points.
    pub fixed_points: Option<usize>,
    /// Phase B only.
    pub densify: DensifyConfig,
    /// Extension: weight of a penalty pulling each transitioning object's
    /// `p` toward a step at the middle of its transition window. 0 disables it.
    pub schedule_weight: f64,
    pub prompt: String,
}

impl TrainConfig {
    pub fn dynamics(steps: usize, seed: u64) -> Self {
        Self {
            phase: Phase::Dynamics,
            steps,
            seed,
            lr: LearningRates::default(),
            fixed_points: None,
            densify: DensifyConfig {
                enabled: false,
                ..DensifyConfig::default()
            },
            schedule_weight: 0.0,
            prompt: String::new(),
        }
    }

    pub fn refine(steps: usize, seed: u64) -> Self {
        Self {
            phase: Phase::Refine,
            densify: DensifyConfig::default(),
            ..Self::dynamics(steps, seed)
        }
    }
}
