//! The planning document and its JSON reader.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("plan.syntax: malformed JSON at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("plan.missing-key: required key `{0}` is missing")]
    MissingKey(String),
    #[error("plan.arity: `{path}` expected {expected}, found {actual}")]
    Arity {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("plan.type: `{path}` must be {expected}")]
    Type { path: String, expected: String },
    #[error("plan.empty: the plan declares no objects")]
    Empty,
    #[error("plan.invalid: {0}")]
    Invalid(String),
}

impl PlanError {
    pub fn code(&self) -> &'static str {
        match self {
            PlanError::Syntax { .. } => "plan.syntax",
            PlanError::MissingKey(_) => "plan.missing-key",
            PlanError::Arity { .. } => "plan.arity",
            PlanError::Type { .. } => "plan.type",
            PlanError::Empty => "plan.empty",
            PlanError::Invalid(_) => "plan.invalid",
        }
    }
}

pub type Vec3 = [f64; 3];

/// Parsed planning data, one entry per object in every per-object list.
///
/// Field names follow the JSON keys. Lists are kept as written; arity across
/// lists is checked by validation, not parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub obj_prompt: Vec<String>,
    pub init_pos: Vec<Vec3>,
    /// Per object: per-frame displacement for each movement segment.
    pub move_list: Vec<Vec<Vec3>>,
    /// Per object: interior segment boundaries.
    pub move_time: Vec<Vec<f64>>,
    /// Per object: initial Euler angles in degrees.
    pub init_angle: Vec<Vec3>,
    /// Per object: per-frame rotation (degrees) for each rotation window.
    pub rotations: Vec<Vec<Vec3>>,
    /// Per object: `[start, end]` windows, one per rotation.
    pub rotations_time: Vec<Vec<[f64; 2]>>,
    pub trans_list: Vec<[usize; 2]>,
    pub trans_period: Vec<[f64; 2]>,
    /// Keys not part of the schema, as dotted paths. Reported as warnings.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unknown_keys: Vec<String>,
    /// Self-transitions and out-of-range indices survive parsing as signed
    /// pairs so validation can report them.
    #[serde(skip)]
    pub(crate) raw_trans: Vec<[i64; 2]>,
}

impl PlanDocument {
    pub fn object_count(&self) -> usize {
        self.obj_prompt.len()
    }

    /// Transition pairs exactly as written, including invalid indices.
    pub fn transition_pairs(&self) -> &[[i64; 2]] {
        &self.raw_trans
    }

    /// Serializes back to the `{"sample": {...}}` layout.
    pub fn to_json(&self) -> Value {
        let traj = serde_json::json!({
            "init_pos": self.init_pos,
            "move_list": self.move_list,
            "move_time": self.move_time,
            "init_angle": self.init_angle,
            "rotations": self.rotations,
            "rotations_time": self.rotations_time,
            "trans_list": self.raw_trans,
            "trans_period": self.trans_period,
        });
        serde_json::json!({ "sample": { "obj_prompt": self.obj_prompt, "TrajParams": traj } })
    }
}

const TRAJ_KEYS: [&str; 8] = [
    "init_pos",
    "move_list",
    "move_time",
    "init_angle",
    "rotations",
    "rotations_time",
    "trans_list",
    "trans_period",
];

fn type_err(path: &str, expected: &str) -> PlanError {
    PlanError::Type {
        path: path.to_string(),
        expected: expected.to_string(),
    }
}

fn get<'a>(obj: &'a Map<String, Value>, key: &str, prefix: &str) -> Result<&'a Value, PlanError> {
    obj.get(key)
        .ok_or_else(|| PlanError::MissingKey(format!("{prefix}{key}")))
}

fn array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, PlanError> {
    v.as_array().ok_or_else(|| type_err(path, "an array"))
}

fn number(v: &Value, path: &str) -> Result<f64, PlanError> {
    v.as_f64().ok_or_else(|| type_err(path, "a number"))
}

fn numbers<const N: usize>(v: &Value, path: &str) -> Result<[f64; N], PlanError> {
    let items = array(v, path)?;
    if items.len() != N {
        return Err(PlanError::Arity {
            path: path.to_string(),
            expected: format!("{N} numbers"),
            actual: format!("{} entries", items.len()),
        });
    }
    let mut out = [0.0; N];
    for (k, item) in items.iter().enumerate() {
        out[k] = number(item, &format!("{path}[{k}]"))?;
    }
    Ok(out)
}

fn list_of<T>(
    v: &Value,
    path: &str,
    mut f: impl FnMut(&Value, &str) -> Result<T, PlanError>,
) -> Result<Vec<T>, PlanError> {
    array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, item)| f(item, &format!("{path}[{i}]")))
        .collect()
}

/// A rotation window list is either `[[s, e], ...]` or the single-pair
/// shorthand `[s, e]`.
fn windows(v: &Value, path: &str) -> Result<Vec<[f64; 2]>, PlanError> {
    let items = array(v, path)?;
    if !items.is_empty() && items.iter().all(Value::is_number) {
        return Ok(vec![numbers::<2>(v, path)?]);
    }
    list_of(v, path, numbers::<2>)
}

fn index_pair(v: &Value, path: &str) -> Result<[i64; 2], PlanError> {
    let items = array(v, path)?;
    if items.len() != 2 {
        return Err(PlanError::Arity {
            path: path.to_string(),
            expected: "2 object indices".into(),
            actual: format!("{} entries", items.len()),
        });
    }
    let idx = |k: usize| -> Result<i64, PlanError> {
        let v = &items[k];
        v.as_i64()
            .or_else(|| v.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64))
            .ok_or_else(|| type_err(&format!("{path}[{k}]"), "an integer"))
    };
    Ok([idx(0)?, idx(1)?])
}

/// Parses a plan. Only syntax and shape problems are errors here; semantic
/// problems (time ranges, indices, cross-list arity) are left to validation.
pub fn parse_plan(bytes: &[u8]) -> Result<PlanDocument, PlanError> {
    let root: Value = serde_json::from_slice(bytes).map_err(|e| PlanError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let root = root.as_object().ok_or_else(|| type_err("$", "an object"))?;
    let mut unknown = Vec::new();
    unknown.extend(root.keys().filter(|k| *k != "sample").cloned());

    let sample = get(root, "sample", "")?
        .as_object()
        .ok_or_else(|| type_err("sample", "an object"))?;
    unknown.extend(
        sample
            .keys()
            .filter(|k| *k != "obj_prompt" && *k != "TrajParams")
            .map(|k| format!("sample.{k}")),
    );

    let prompts = list_of(get(sample, "obj_prompt", "sample.")?, "sample.obj_prompt", |v, p| {
        v.as_str().map(str::to_string).ok_or_else(|| type_err(p, "a string"))
    })?;
    if prompts.is_empty() {
        return Err(PlanError::Empty);
    }

    let traj = get(sample, "TrajParams", "sample.")?
        .as_object()
        .ok_or_else(|| type_err("sample.TrajParams", "an object"))?;
    unknown.extend(
        traj.keys()
            .filter(|k| !TRAJ_KEYS.contains(&k.as_str()))
            .map(|k| format!("sample.TrajParams.{k}")),
    );
    let field = |key: &str| get(traj, key, "sample.TrajParams.");
    let path = |key: &str| format!("TrajParams.{key}");

    let init_pos = list_of(field("init_pos")?, &path("init_pos"), numbers::<3>)?;
    let move_list = list_of(field("move_list")?, &path("move_list"), |v, p| {
        list_of(v, p, numbers::<3>)
    })?;
    let move_time = list_of(field("move_time")?, &path("move_time"), |v, p| {
        list_of(v, p, number)
    })?;
    let init_angle = list_of(field("init_angle")?, &path("init_angle"), numbers::<3>)?;
    let rotations = list_of(field("rotations")?, &path("rotations"), |v, p| {
        list_of(v, p, numbers::<3>)
    })?;
    let rotations_time = list_of(field("rotations_time")?, &path("rotations_time"), windows)?;
    let raw_trans = list_of(field("trans_list")?, &path("trans_list"), index_pair)?;
    let trans_period = list_of(field("trans_period")?, &path("trans_period"), numbers::<2>)?;

    let trans_list = raw_trans
        .iter()
        .map(|[a, b]| [(*a).max(0) as usize, (*b).max(0) as usize])
        .collect();

    Ok(PlanDocument {
        obj_prompt: prompts,
        init_pos,
        move_list,
        move_time,
        init_angle,
        rotations,
        rotations_time,
        trans_list,
        trans_period,
        unknown_keys: unknown,
        raw_trans,
    })
}
