//! Turning transition probabilities into visibility.
//!
//! Training multiplies opacity by `p`. Inference draws a keyed uniform
//! `u ∈ (0, 1]` per point and keeps the point when `p ≥ u`.

use crate::scene::GaussianCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error("{points} points but {probs} probabilities")]
    Arity { points: usize, probs: usize },
    #[error("train_opacity mode has no mask")]
    NoMask,
    #[error("unknown gate mode `{0}`")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    TrainOpacity,
    Bernoulli,
    #[default]
    Threshold,
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TrainOpacity => "train_opacity",
            Self::Bernoulli => "bernoulli",
            Self::Threshold => "threshold",
        })
    }
}

impl FromStr for GateKind {
    type Err = GateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train_opacity" => Ok(Self::TrainOpacity),
            "bernoulli" => Ok(Self::Bernoulli),
            "threshold" => Ok(Self::Threshold),
            other => Err(GateError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct GateMode {
    pub kind: GateKind,
    pub seed: u64,
}

impl GateMode {
    pub fn new(kind: GateKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

/// Threshold draws use this frame slot so they never depend on the frame.
const FIXED_FRAME: u64 = u64::MAX;

/// Uniform in `(0, 1]` determined only by the key.
pub fn keyed_uniform(seed: u64, object: usize, point_id: u64, frame: u64) -> f64 {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(object as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(point_id);
    // 16 words per block, one block per frame
    rng.set_word_pos(frame as u128 * 16);
    1.0 - rng.random::<f64>()
}

/// Effective opacities `αᵢ · pᵢ`.
pub fn gate_train(cloud: &GaussianCloud, p: &[f64]) -> Result<Vec<f64>, GateError> {
    if p.len() != cloud.len() {
        return Err(GateError::Arity {
            points: cloud.len(),
            probs: p.len(),
        });
    }
    Ok(cloud
        .points()
        .iter()
        .zip(p)
        .map(|(pt, p)| pt.opacity * p)
        .collect())
}

/// Visibility mask for the points of object `object` at `frame`.
pub fn gate_infer(
    cloud: &GaussianCloud,
    object: usize,
    p: &[f64],
    mode: GateMode,
    frame: u64,
) -> Result<Vec<bool>, GateError> {
    if p.len() != cloud.len() {
        return Err(GateError::Arity {
            points: cloud.len(),
            probs: p.len(),
        });
    }
    let frame = match mode.kind {
        GateKind::TrainOpacity => return Err(GateError::NoMask),
        GateKind::Bernoulli => frame,
        GateKind::Threshold => FIXED_FRAME,
    };
    Ok(cloud
        .points()
        .iter()
        .zip(p)
        .map(|(pt, &p)| p >= 1.0 || (p > 0.0 && p >= keyed_uniform(mode.seed, object, pt.point_id, frame)))
        .collect())
}
