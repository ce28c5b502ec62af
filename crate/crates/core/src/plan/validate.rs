//! Semantic checks over a parsed plan.
//!
//! Every finding carries a code from [`FindingCode`]; the registry is the
//! complete list and is mirrored in `docs/plan-format.md`.

use super::document::PlanDocument;
use serde::Serialize;
use std::fmt;

/// Half-width of the visible scene cube, in scene units.
pub const SCENE_HALF_EXTENT: f64 = 1.0;
/// Uniform time samples used for the visibility check.
pub const VISIBILITY_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum FindingCode {
    UnknownKey,
    TimeRange,
    TimeOrder,
    PeriodOrder,
    ArityObjects,
    ArityMove,
    MovePadded,
    ArityRotation,
    ArityTrans,
    TransIndex,
    TransSelf,
    TransOverlap,
    NeverVisible,
}

impl FindingCode {
    pub const ALL: [FindingCode; 13] = [
        FindingCode::UnknownKey,
        FindingCode::TimeRange,
        FindingCode::TimeOrder,
        FindingCode::PeriodOrder,
        FindingCode::ArityObjects,
        FindingCode::ArityMove,
        FindingCode::MovePadded,
        FindingCode::ArityRotation,
        FindingCode::ArityTrans,
        FindingCode::TransIndex,
        FindingCode::TransSelf,
        FindingCode::TransOverlap,
        FindingCode::NeverVisible,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FindingCode::UnknownKey => "plan.unknown-key",
            FindingCode::TimeRange => "time.range",
            FindingCode::TimeOrder => "time.order",
            FindingCode::PeriodOrder => "period.order",
            FindingCode::ArityObjects => "arity.objects",
            FindingCode::ArityMove => "arity.move",
            FindingCode::MovePadded => "arity.move-padded",
            FindingCode::ArityRotation => "arity.rotation",
            FindingCode::ArityTrans => "arity.trans",
            FindingCode::TransIndex => "trans.index",
            FindingCode::TransSelf => "trans.self",
            FindingCode::TransOverlap => "trans.overlap",
            FindingCode::NeverVisible => "scene.never-visible",
        }
    }

    pub fn severity(self) -> Severity {
        match self {
            FindingCode::UnknownKey
            | FindingCode::MovePadded
            | FindingCode::TransOverlap
            | FindingCode::NeverVisible => Severity::Warning,
            _ => Severity::Error,
        }
    }
}

impl fmt::Display for FindingCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub code: FindingCode,
    /// Object the finding refers to, when there is one.
    pub object: Option<usize>,
    pub message: String,
}

impl fmt::Display for Finding {
    /// `CODE<TAB>OBJ<TAB>MESSAGE`, with `-` for scene-level findings.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let obj = self.object.map_or_else(|| "-".to_string(), |o| o.to_string());
        write!(f, "{}\t{}\t{}", self.code, obj, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Warning)
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }

    pub fn codes(&self) -> Vec<FindingCode> {
        self.findings.iter().map(|f| f.code).collect()
    }

    fn push(&mut self, code: FindingCode, object: Option<usize>, message: impl Into<String>) {
        self.findings.push(Finding {
            severity: code.severity(),
            code,
            object,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for finding in &self.findings {
            writeln!(f, "{finding}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidateOptions {
    /// Accept objects with fewer movement segments than boundaries + 1; the
    /// missing segments are treated as stationary.
    pub lenient: bool,
    /// Frames per unit time used to turn per-frame vectors into rates.
    pub frame_count: usize,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            lenient: false,
            frame_count: super::DEFAULT_FRAME_COUNT,
        }
    }
}

fn in_unit(t: f64) -> bool {
    (0.0..=1.0).contains(&t)
}

pub fn validate_plan(doc: &PlanDocument) -> ValidationReport {
    validate_plan_with(doc, ValidateOptions::default())
}

pub fn validate_plan_with(doc: &PlanDocument, options: ValidateOptions) -> ValidationReport {
    let mut report = ValidationReport::default();
    let m = doc.object_count();

    for key in &doc.unknown_keys {
        report.push(FindingCode::UnknownKey, None, format!("unknown key `{key}` ignored"));
    }

    let lengths = [
        ("init_pos", doc.init_pos.len()),
        ("move_list", doc.move_list.len()),
        ("move_time", doc.move_time.len()),
        ("init_angle", doc.init_angle.len()),
        ("rotations", doc.rotations.len()),
        ("rotations_time", doc.rotations_time.len()),
    ];
    for (name, len) in lengths {
        if len != m {
            report.push(
                FindingCode::ArityObjects,
                None,
                format!("`{name}` has {len} entries for {m} objects"),
            );
        }
    }

    for (i, times) in doc.move_time.iter().enumerate() {
        let out: Vec<f64> = times.iter().copied().filter(|t| !in_unit(*t)).collect();
        if !out.is_empty() {
            report.push(
                FindingCode::TimeRange,
                Some(i),
                format!("move_time values {out:?} outside [0, 1]"),
            );
        } else if times.windows(2).any(|w| w[0] >= w[1])
            || times.first().is_some_and(|t| *t <= 0.0)
            || times.last().is_some_and(|t| *t >= 1.0)
        {
            report.push(
                FindingCode::TimeOrder,
                Some(i),
                format!("move_time {times:?} must be strictly increasing inside (0, 1)"),
            );
        }
    }

    let window_checks = doc
        .rotations_time
        .iter()
        .enumerate()
        .flat_map(|(i, ws)| ws.iter().map(move |w| (Some(i), "rotations_time", *w)))
        .chain(doc.trans_period.iter().map(|w| (None, "trans_period", *w)));
    for (obj, name, [s, e]) in window_checks {
        if !in_unit(s) || !in_unit(e) {
            report.push(
                FindingCode::TimeRange,
                obj,
                format!("{name} window [{s}, {e}] outside [0, 1]"),
            );
        } else if s >= e {
            report.push(
                FindingCode::PeriodOrder,
                obj,
                format!("{name} window [{s}, {e}] must have start < end"),
            );
        }
    }

    for i in 0..m {
        let (Some(segments), Some(times)) = (doc.move_list.get(i), doc.move_time.get(i)) else {
            continue;
        };
        let expected = times.len() + 1;
        let stationary = segments.is_empty() && times.is_empty();
        if segments.len() != expected && !stationary {
            if options.lenient && segments.len() < expected {
                report.push(
                    FindingCode::MovePadded,
                    Some(i),
                    format!(
                        "{} movement segments for {} boundaries; padded with stationary segments",
                        segments.len(),
                        times.len()
                    ),
                );
            } else {
                report.push(
                    FindingCode::ArityMove,
                    Some(i),
                    format!(
                        "move_list has {} segments, move_time implies {expected}",
                        segments.len()
                    ),
                );
            }
        }
        if let (Some(rot), Some(win)) = (doc.rotations.get(i), doc.rotations_time.get(i)) {
            if rot.len() != win.len() {
                report.push(
                    FindingCode::ArityRotation,
                    Some(i),
                    format!("rotations has {} entries, rotations_time {}", rot.len(), win.len()),
                );
            }
        }
    }

    if doc.trans_period.len() != doc.raw_trans.len() {
        report.push(
            FindingCode::ArityTrans,
            None,
            format!(
                "trans_list has {} pairs, trans_period {}",
                doc.raw_trans.len(),
                doc.trans_period.len()
            ),
        );
    }
    for (k, [a, b]) in doc.raw_trans.iter().enumerate() {
        let bad: Vec<i64> = [*a, *b]
            .into_iter()
            .filter(|v| *v < 0 || *v as usize >= m)
            .collect();
        if !bad.is_empty() {
            report.push(
                FindingCode::TransIndex,
                None,
                format!("trans_list[{k}] references objects {bad:?}; valid range is [0, {m})"),
            );
        } else if a == b {
            report.push(
                FindingCode::TransSelf,
                Some(*a as usize),
                format!("trans_list[{k}] transitions object {a} into itself"),
            );
        }
    }

    check_overlaps(doc, &mut report);
    check_visibility(doc, options, &mut report);
    report
}

fn check_overlaps(doc: &PlanDocument, report: &mut ValidationReport) {
    let n = doc.raw_trans.len().min(doc.trans_period.len());
    for a in 0..n {
        for b in a + 1..n {
            let [pa, qa] = doc.raw_trans[a];
            let [pb, qb] = doc.raw_trans[b];
            let shared = [pa, qa].into_iter().find(|o| *o == pb || *o == qb);
            let Some(obj) = shared else { continue };
            let [sa, ea] = doc.trans_period[a];
            let [sb, eb] = doc.trans_period[b];
            if sa.max(sb) < ea.min(eb) {
                report.push(
                    FindingCode::TransOverlap,
                    usize::try_from(obj).ok(),
                    format!("transitions {a} and {b} share object {obj} over overlapping periods"),
                );
            }
        }
    }
}

fn check_visibility(doc: &PlanDocument, options: ValidateOptions, report: &mut ValidationReport) {
    for i in 0..doc.object_count() {
        let Some(track) =
            super::timeline::object_track(doc, i, options.frame_count as f64, options.lenient)
        else {
            continue;
        };
        let visible = (0..VISIBILITY_SAMPLES).any(|k| {
            let t = k as f64 / (VISIBILITY_SAMPLES - 1) as f64;
            let p = track.position_at(t);
            p.iter().all(|v| v.abs() <= SCENE_HALF_EXTENT)
        });
        if !visible {
            report.push(
                FindingCode::NeverVisible,
                Some(i),
                format!(
                    "object {i} (\"{}\") never enters the [-1, 1]³ scene",
                    doc.obj_prompt[i]
                ),
            );
        }
    }
}
