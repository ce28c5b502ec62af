use super::RenderError;
use crate::neural::Matrix;
use std::io::Write;
use std::path::Path;

/// RGB float image, row-major from the top row.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl Image {
    pub fn black(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; (width * height * 3) as usize],
        }
    }

    pub fn pixel_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// From an `(H·W)×3` matrix.
    pub fn from_matrix(m: &Matrix, width: u32, height: u32) -> Self {
        assert_eq!(m.dim(), ((width * height) as usize, 3));
        Self {
            width,
            height,
            data: m.iter().map(|v| *v as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_shape_vec((self.pixel_count(), 3), self.data.iter().map(|v| *v as f64).collect())
            .expect("image data is H·W·3")
    }

    pub fn to_png(&self) -> Result<Vec<u8>, RenderError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let mut out = Vec::new();
        image::write_buffer_with_format(
            &mut std::io::Cursor::new(&mut out),
            &bytes,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| RenderError::Io(e.to_string()))?;
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, RenderError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| RenderError::Io(e.to_string()))?
            .to_rgb8();
        Ok(Self {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|v| *v as f32 / 255.0).collect(),
        })
    }

    /// Portable float map: little-endian, bottom row first.
    pub fn to_pfm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4 + 32);
        write!(out, "PF\n{} {}\n-1.0\n", self.width, self.height).unwrap();
        let row = (self.width * 3) as usize;
        for y in (0..self.height as usize).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_pfm(bytes: &[u8]) -> Result<Self, RenderError> {
        let bad = |why: &str| RenderError::Io(format!("pfm: {why}"));
        let mut fields = Vec::new();
        let mut at = 0;
        while fields.len() < 4 {
            while at < bytes.len() && bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            let start = at;
            while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            if start == at {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| bad("header"))?);
        }
        at += 1;
        if fields[0] != "PF" {
            return Err(bad("only colour PF files are supported"));
        }
        let width: u32 = fields[1].parse().map_err(|_| bad("width"))?;
        let height: u32 = fields[2].parse().map_err(|_| bad("height"))?;
        let scale: f32 = fields[3].parse().map_err(|_| bad("scale"))?;
        let little = scale < 0.0;
        let count = (width as usize) * (height as usize) * 3;
        let body = bytes.get(at..at + count * 4).ok_or_else(|| bad("truncated data"))?;
        let values: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                }
            })
            .collect();
        let row = (width * 3) as usize;
        let mut data = Vec::with_capacity(count);
        for y in (0..height as usize).rev() {
            data.extend_from_slice(&values[y * row..(y + 1) * row]);
        }
        Ok(Self { width, height, data })
    }

    pub fn load(path: &Path) -> Result<Self, RenderError> {
        let bytes = std::fs::read(path).map_err(|e| RenderError::Io(format!("{}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("pfm") => Self::from_pfm(&bytes),
            _ => Self::from_png(&bytes),
        }
    }
}

/// Mean squared error over all channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64, RenderError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(RenderError::SizeMismatch {
            expected: (a.width, a.height),
            actual: (b.width, b.height),
        });
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio for unit peak; infinite for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, RenderError> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}
