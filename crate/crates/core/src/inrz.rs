//! `INRZ` weight container and its JSON sidecar.
//!
//! Layout (little-endian): `"INRZ"`, `u32` version, `u32` in_dim, out_dim,
//! depth, width, `f64` w0, 6×`f64` norm (mean then std), then for each layer
//! its row-major `f32` weights followed by its `f32` biases, and finally a
//! CRC32 of every preceding byte.
//!
//! `out_dim = 3` is an image INR (sine hidden layers). `out_dim = 4` is a
//! radiance-field head whose `in_dim` is the encoded input width and whose
//! hidden layers use ReLU; its `w0` field is written as 0.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::{CoreError, Result};
use crate::inr2d::{check_chain, Inr2d, Layer, NormConstants};

pub const MAGIC: &[u8; 4] = b"INRZ";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 * 4 + 8 + 6 * 8;

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("bad magic bytes (not an INRZ file)")]
    BadMagic,
    #[error("unsupported INRZ version {found} (this build reads version {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("malformed header: {0}")]
    Malformed(String),
}

/// Architecture-agnostic contents of an INRZ file.
#[derive(Debug, Clone, PartialEq)]
pub struct InrRecord {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w0: f64,
    pub norm: NormConstants,
    pub layers: Vec<Layer>,
}

impl InrRecord {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.out_dim)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_chain(&self.layers, self.in_dim, self.out_dim)?;
        if self.layers.iter().any(|l| !l.check_finite()) {
            return Err(CoreError::invalid("refusing to write non-finite weights"));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.param_count() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [self.in_dim, self.out_dim, self.depth(), self.width()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.w0.to_le_bytes());
        for v in self.norm.mean.iter().chain(&self.norm.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.layers {
            for &v in l.weight.iter().chain(&l.bias) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Validation order: length, magic, version, CRC, then shape consistency.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 8 {
            return Err(FormatError::Truncated(format!("{} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion { found: version });
        }
        if bytes.len() < HEADER_LEN + 4 {
            return Err(FormatError::Truncated(format!(
                "{} bytes, header alone needs {}",
                bytes.len(),
                HEADER_LEN + 4
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(FormatError::CrcMismatch { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 8 };
        let in_dim = r.u32() as usize;
        let out_dim = r.u32() as usize;
        let depth = r.u32() as usize;
        let width = r.u32() as usize;
        let w0 = r.f64();
        let mean = [r.f64(), r.f64(), r.f64()];
        let std = [r.f64(), r.f64(), r.f64()];
        if depth < 1 || in_dim == 0 || out_dim == 0 || (depth > 1 && width == 0) {
            return Err(FormatError::Malformed(format!(
                "in_dim={in_dim} out_dim={out_dim} depth={depth} width={width}"
            )));
        }
        let norm = NormConstants::new(mean, std).map_err(|e| FormatError::Malformed(e.to_string()))?;
        let dims: Vec<(usize, usize)> = (0..depth)
            .map(|i| {
                let a = if i == 0 { in_dim } else { width };
                let b = if i + 1 == depth { out_dim } else { width };
                (a, b)
            })
            .collect();
        let expected: usize = dims.iter().map(|(a, b)| a * b + b).sum::<usize>() * 4;
        if body.len() - HEADER_LEN != expected {
            return Err(FormatError::Truncated(format!(
                "weight section is {} bytes, architecture needs {expected}",
                body.len() - HEADER_LEN
            )));
        }
        let layers = dims
            .into_iter()
            .map(|(a, b)| Layer {
                in_dim: a,
                out_dim: b,
                weight: (0..a * b).map(|_| r.f32() as f64).collect(),
                bias: (0..b).map(|_| r.f32() as f64).collect(),
            })
            .collect();
        Ok(Self {
            in_dim,
            out_dim,
            w0,
            norm,
            layers,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.buf[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

impl From<&Inr2d> for InrRecord {
    fn from(inr: &Inr2d) -> Self {
        Self {
            in_dim: 2,
            out_dim: 3,
            w0: inr.w0(),
            norm: inr.norm(),
            layers: inr.layers().to_vec(),
        }
    }
}

impl TryFrom<InrRecord> for Inr2d {
    type Error = CoreError;

    fn try_from(r: InrRecord) -> Result<Self> {
        if r.in_dim != 2 || r.out_dim != 3 {
            return Err(CoreError::invalid(format!(
                "expected an image INR (2 -> 3), file holds {} -> {}",
                r.in_dim, r.out_dim
            )));
        }
        Inr2d::new(r.w0, r.layers, r.norm)
    }
}

pub fn save_inr2d(inr: &Inr2d, path: &Path) -> Result<()> {
    InrRecord::from(inr).write(path)
}

pub fn load_inr2d(path: &Path) -> Result<Inr2d> {
    Inr2d::try_from(InrRecord::read(path)?)
}

/// Provenance written next to each weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub id: String,
    /// SHA-256 of the source file bytes, hex encoded.
    pub source_hash: String,
    pub psnr: f64,
    pub iterations: usize,
    pub phase: String,
    /// `[height, width]` of the fitted image, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
}

impl Sidecar {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| CoreError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Sidecar path for a weight file: `x.inrz` → `x.json`.
pub fn sidecar_path(weights: &Path) -> std::path::PathBuf {
    weights.with_extension("json")
}
