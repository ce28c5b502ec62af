//! Binary little-endian PLY in the common 3DGS vertex layout.

use super::{GaussianCloud, GaussianPoint, SceneError};
use nalgebra::{Quaternion, Vector3};

/// Zeroth-order spherical-harmonic constant: `color = 0.5 + SH_C0 * f_dc`.
pub const SH_C0: f64 = 0.28209479177;

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

/// Quaternions whose stored norm is this close to one are kept bit-exact.
const UNIT_TOLERANCE: f64 = 1e-6;

/// One vertex record exactly as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoredPoint {
    pub position: [f32; 3],
    pub f_dc: [f32; 3],
    pub opacity_logit: f32,
    pub log_scale: [f32; 3],
    pub rotation: [f32; 4],
}

impl StoredPoint {
    pub fn from_point(p: &GaussianPoint) -> Self {
        let logit = (p.opacity / (1.0 - p.opacity)).ln();
        Self {
            position: p.position.map(|v| v as f32).into(),
            f_dc: p.color.map(|c| ((c - 0.5) / SH_C0) as f32).into(),
            opacity_logit: logit as f32,
            log_scale: p.scale.map(|s| s.ln() as f32).into(),
            rotation: [
                p.rotation.w as f32,
                p.rotation.i as f32,
                p.rotation.j as f32,
                p.rotation.k as f32,
            ],
        }
    }

    pub fn to_point(&self, point_id: u64) -> GaussianPoint {
        let v3 = |a: [f32; 3]| Vector3::new(a[0] as f64, a[1] as f64, a[2] as f64);
        let r = self.rotation.map(|v| v as f64);
        let mut rotation = Quaternion::new(r[0], r[1], r[2], r[3]);
        let norm = rotation.norm();
        if (norm - 1.0).abs() > UNIT_TOLERANCE && norm > 0.0 {
            rotation /= norm;
        }
        GaussianPoint {
            point_id,
            position: v3(self.position),
            scale: v3(self.log_scale).map(f64::exp),
            rotation,
            opacity: sigmoid(self.opacity_logit as f64),
            color: v3(self.f_dc).map(|f| (0.5 + SH_C0 * f).clamp(0.0, 1.0)),
        }
    }

    fn fields(&self) -> [f32; 14] {
        let [x, y, z] = self.position;
        let [d0, d1, d2] = self.f_dc;
        let [s0, s1, s2] = self.log_scale;
        let [r0, r1, r2, r3] = self.rotation;
        [x, y, z, d0, d1, d2, self.opacity_logit, s0, s1, s2, r0, r1, r2, r3]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Default)]
pub struct ImportOptions {
    /// Recenter the cloud at the origin when its centroid is further than 0.05.
    pub canonical: bool,
    pub label: String,
}

/// Recentering threshold for canonical imports, in scene units.
pub const CANONICAL_TOLERANCE: f64 = 0.05;

pub fn export_ply(cloud: &GaussianCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(256 + cloud.len() * 56);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for name in REQUIRED {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");
    out.extend_from_slice(header.as_bytes());
    for i in cloud.id_order() {
        for v in StoredPoint::from_point(&cloud.points()[i]).fields() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    properties: Vec<(String, ScalarType)>,
}

impl Element {
    fn stride(&self) -> usize {
        self.properties.iter().map(|(_, t)| t.size()).sum()
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<Element>, usize), SceneError> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| SceneError::Ply("missing end_header".into()))?;
    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|_| SceneError::Ply("header is not UTF-8".into()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(SceneError::Ply("missing `ply` magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "binary_little_endian", _] => format_ok = true,
            ["format", other, ..] => {
                return Err(SceneError::Ply(format!("unsupported format `{other}`")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| SceneError::Ply(format!("bad element count `{count}`")))?,
                properties: Vec::new(),
            }),
            ["property", "list", ..] => {
                return Err(SceneError::Ply("list properties are not supported".into()))
            }
            ["property", ty, name] => {
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| SceneError::Ply(format!("unknown property type `{ty}`")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| SceneError::Ply("property before element".into()))?
                    .properties
                    .push((name.to_string(), ty));
            }
            _ => return Err(SceneError::Ply(format!("unrecognized header line `{line}`"))),
        }
    }
    if !format_ok {
        return Err(SceneError::Ply("missing format line".into()));
    }
    Ok((elements, end + END.len()))
}

/// Reads a cloud; point ids are assigned in file order starting at zero.
pub fn import_ply(bytes: &[u8], options: &ImportOptions) -> Result<GaussianCloud, SceneError> {
    let (elements, mut offset) = parse_header(bytes)?;
    let mut vertex = None;
    for el in &elements {
        if el.name == "vertex" {
            vertex = Some(el);
            break;
        }
        offset += el.count * el.stride();
    }
    let vertex = vertex.ok_or_else(|| SceneError::Ply("no vertex element".into()))?;

    let mut columns = [(0usize, ScalarType::F32); REQUIRED.len()];
    for (slot, name) in columns.iter_mut().zip(REQUIRED) {
        let mut at = 0;
        let mut found = None;
        for (pname, ty) in &vertex.properties {
            if pname == name {
                found = Some((at, *ty));
                break;
            }
            at += ty.size();
        }
        *slot = found.ok_or_else(|| SceneError::MissingProperty(name.to_string()))?;
    }

    let stride = vertex.stride();
    let needed = offset + vertex.count * stride;
    if bytes.len() < needed {
        return Err(SceneError::Ply(format!(
            "truncated body: {} bytes, expected {needed}",
            bytes.len()
        )));
    }

    let mut points = Vec::with_capacity(vertex.count);
    for index in 0..vertex.count {
        let row = &bytes[offset + index * stride..offset + (index + 1) * stride];
        let mut f = [0f32; 14];
        for (k, (at, ty)) in columns.iter().enumerate() {
            let v = ty.read(&row[*at..]);
            if !v.is_finite() {
                return Err(SceneError::NonFinite {
                    index,
                    property: REQUIRED[k].to_string(),
                });
            }
            f[k] = v as f32;
        }
        let stored = StoredPoint {
            position: [f[0], f[1], f[2]],
            f_dc: [f[3], f[4], f[5]],
            opacity_logit: f[6],
            log_scale: [f[7], f[8], f[9]],
            rotation: [f[10], f[11], f[12], f[13]],
        };
        let point = stored.to_point(index as u64);
        if point.rotation.norm() == 0.0 {
            return Err(SceneError::InvalidPoint {
                point_id: index as u64,
                reason: "zero rotation quaternion".into(),
            });
        }
        points.push(point);
    }

    let mut cloud = GaussianCloud::new(options.label.clone(), points, options.canonical)?;
    if options.canonical {
        let c = cloud.centroid();
        if c.norm() > CANONICAL_TOLERANCE {
            for p in &mut cloud.points {
                p.position -= c;
            }
        }
    }
    Ok(cloud)
}
