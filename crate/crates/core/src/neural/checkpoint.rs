//! Binary network checkpoints.
//!
//! Layout, little-endian throughout:
//! `"T4DN"`, `u32` version, `u32` flags (bit 0: shared transition net),
//! `u32` network count, then per network: `u16` name length, UTF-8 name,
//! `u32` layer-dim count, that many `u32` dims, `u32` bands_x, `u32` bands_t,
//! `f64` w_trans (0 for deformation nets). After the table come every
//! network's parameters as `f32`, in table order and layer order.

use super::nets::{DeformationNet, Dense, Mlp, SceneNets, TransitionNet};
use super::tape::Matrix;
use super::NeuralError;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"T4DN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Entry<'a> {
    name: String,
    mlp: &'a Mlp,
    bands_x: usize,
    bands_t: usize,
    w_trans: f64,
}

fn entries(nets: &SceneNets) -> Vec<Entry<'_>> {
    let d = nets.deform.iter().enumerate().map(|(i, n)| Entry {
        name: format!("deform.{i}"),
        mlp: &n.mlp,
        bands_x: n.bands_x,
        bands_t: n.bands_t,
        w_trans: 0.0,
    });
    let t = nets.transition.iter().enumerate().map(|(k, n)| Entry {
        name: format!("transition.{k}"),
        mlp: &n.mlp,
        bands_x: n.bands_x,
        bands_t: n.bands_t,
        w_trans: n.w_trans,
    });
    d.chain(t).collect()
}

pub fn encode_checkpoint(nets: &SceneNets) -> Vec<u8> {
    let table = entries(nets);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, nets.shared_transition as u32);
    put_u32(&mut out, table.len() as u32);
    for e in &table {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        put_u32(&mut out, e.mlp.dims().len() as u32);
        for d in e.mlp.dims() {
            put_u32(&mut out, *d as u32);
        }
        put_u32(&mut out, e.bands_x as u32);
        put_u32(&mut out, e.bands_t as u32);
        out.extend_from_slice(&e.w_trans.to_le_bytes());
    }
    for e in &table {
        for x in e.mlp.parameters() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NeuralError> {
        let end = self.at.checked_add(n).ok_or(NeuralError::Truncated)?;
        let s = self.bytes.get(self.at..end).ok_or(NeuralError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, NeuralError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, NeuralError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NeuralError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Header {
    name: String,
    dims: Vec<usize>,
    bands_x: usize,
    bands_t: usize,
    w_trans: f64,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SceneNets, NeuralError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(NeuralError::Magic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NeuralError::Version(version));
    }
    let shared = r.u32()? & 1 == 1;
    let count = r.u32()? as usize;
    let mut headers = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| NeuralError::Format("name".into()))?;
        let n_dims = r.u32()? as usize;
        if n_dims > 64 {
            return Err(NeuralError::Format(format!("{n_dims} layer dims")));
        }
        let dims = (0..n_dims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        headers.push(Header {
            name,
            dims,
            bands_x: r.u32()? as usize,
            bands_t: r.u32()? as usize,
            w_trans: r.f64()?,
        });
    }

    let mut deform = Vec::new();
    let mut transition = Vec::new();
    for h in headers {
        if h.dims.len() < 2 || h.dims.contains(&0) {
            return Err(NeuralError::Dims(h.dims));
        }
        let mut layers = Vec::new();
        for w in h.dims.windows(2) {
            let weight = (0..w[0] * w[1]).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>, _>>()?;
            let bias = (0..w[1]).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>, _>>()?;
            layers.push(Dense {
                weight: Matrix::from_shape_vec((w[0], w[1]), weight).unwrap(),
                bias: Matrix::from_shape_vec((1, w[1]), bias).unwrap(),
            });
        }
        let mlp = Mlp::from_layers(layers)?;
        let expected_in = super::nets::feature_width(h.bands_x, h.bands_t);
        if mlp.dims()[0] != expected_in {
            return Err(NeuralError::Dims(mlp.dims().to_vec()));
        }
        if h.name.starts_with("deform.") {
            if *mlp.dims().last().unwrap() != DeformationNet::OUTPUT {
                return Err(NeuralError::Dims(mlp.dims().to_vec()));
            }
            deform.push(DeformationNet {
                mlp,
                bands_x: h.bands_x,
                bands_t: h.bands_t,
            });
        } else if h.name.starts_with("transition.") {
            if *mlp.dims().last().unwrap() != 1 || !(h.w_trans >= 1.0) {
                return Err(NeuralError::Dims(mlp.dims().to_vec()));
            }
            transition.push(TransitionNet {
                mlp,
                bands_x: h.bands_x,
                bands_t: h.bands_t,
                w_trans: h.w_trans,
            });
        } else {
            return Err(NeuralError::Format(format!("unknown network {}", h.name)));
        }
    }
    if r.at != bytes.len() {
        return Err(NeuralError::Format(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(SceneNets {
        deform,
        transition,
        shared_transition: shared,
    })
}

pub fn save_checkpoint(nets: &SceneNets, path: &Path) -> Result<(), NeuralError> {
    std::fs::write(path, encode_checkpoint(nets)).map_err(|e| NeuralError::Io(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<SceneNets, NeuralError> {
    let bytes = std::fs::read(path).map_err(|e| NeuralError::Io(e.to_string()))?;
    decode_checkpoint(&bytes)
}

/// Fails unless `loaded` has the same network table as `expected`.
pub fn check_compatible(expected: &SceneNets, loaded: &SceneNets) -> Result<(), NeuralError> {
    let a = entries(expected);
    let b = entries(loaded);
    if a.len() != b.len() {
        return Err(NeuralError::Mismatch(format!("{} networks, found {}", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(&b) {
        if x.name != y.name || x.mlp.dims() != y.mlp.dims() || x.bands_x != y.bands_x || x.bands_t != y.bands_t {
            return Err(NeuralError::Mismatch(format!(
                "{} {:?} vs {} {:?}",
                x.name,
                x.mlp.dims(),
                y.name,
                y.mlp.dims()
            )));
        }
    }
    Ok(())
}
