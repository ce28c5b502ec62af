//! Dynamic Gaussian scenes driven by planned rigid trajectories, learned
//! deformation, and learned appear/disappear transitions.

pub mod gate;
pub mod kinematics;
pub mod neural;
pub mod pipeline;
pub mod plan;
pub mod planner;
pub mod render;
pub mod scene;
pub mod trainer;
