//! Planning documents: parsing, validation and compilation into timelines.
//!
//! The on-disk layout is documented in `docs/plan-format.md`.

mod document;
mod timeline;
mod validate;

pub use document::{parse_plan, PlanDocument, PlanError, Vec3};
pub use timeline::{
    compile_timeline, compile_timeline_with, CompileError, CompileOptions, ObjectTrack,
    RateSegment, TimelineProgram, TransitionSpan, EULER_ORDER, TIMELINE_VERSION,
};
pub use validate::{
    validate_plan, validate_plan_with, Finding, FindingCode, Severity, ValidateOptions,
    ValidationReport, SCENE_HALF_EXTENT, VISIBILITY_SAMPLES,
};

/// Frames rendered per unit of scene time.
pub const DEFAULT_FRAME_COUNT: usize = 16;
