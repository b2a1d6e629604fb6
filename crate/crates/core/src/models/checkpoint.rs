//! Named-tensor checkpoint file.
//!
//! ```text
//! magic      8 bytes  "SCLCKPT\0"
//! version    u32 LE   CHECKPOINT_VERSION
//! count      u32 LE   number of tensors
//! per tensor:
//!   name_len u32 LE, name (UTF-8)
//!   rows     u64 LE
//!   cols     u64 LE
//!   data     f64 LE × rows·cols, row-major
//! crc32      u32 LE   over every preceding byte
//! ```

use std::path::Path;

use thiserror::Error;

use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint has no tensor named `{0}`")]
    Missing(String),
    #[error("tensor `{name}` is {}x{} in the checkpoint but the model expects {}x{}", .found.0, .found.1, .expected.0, .expected.1)]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Ordered list of named matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn extend<'a>(&mut self, named: impl IntoIterator<Item = (String, &'a Matrix)>) {
        for (n, m) in named {
            self.push(n, m.clone());
        }
    }

    pub fn tensors(&self) -> &[(String, Matrix)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Copies the tensor `name` into `dst`, checking its shape.
    pub fn load_into(&self, name: &str, dst: &mut Matrix) -> Result<(), CheckpointError> {
        let src = self.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if src.shape() != dst.shape() {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                expected: dst.shape(),
                found: src.shape(),
            });
        }
        *dst = src.clone();
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated("header"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut cur = Cursor { bytes: body, pos: 12 };
        let count = cur.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1024) as usize);
        for _ in 0..count {
            let len = cur.u32("name length")? as usize;
            let name = String::from_utf8(cur.take(len, "name")?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let rows = cur.u64("rows")? as usize;
            let cols = cur.u64("cols")? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` size overflows")))?;
            let raw = cur.take(n, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Matrix::new(rows, cols, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push((name, m));
        }
        if cur.pos != body.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} unexpected bytes after the last tensor",
                body.len() - cur.pos
            )));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push("a.weight", Matrix::from_rows(&[[1.0, -0.0], [f64::MIN_POSITIVE, 3.5e300]]));
        c.push("a.bias", Matrix::from_rows(&[[0.1, 0.2]]));
        c
    }

    #[test]
    fn bytes_round_trip_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        // -0.0 == 0.0 under PartialEq, so compare bit patterns.
        let bits = |c: &Checkpoint| -> Vec<u64> {
            c.tensors().iter().flat_map(|(_, m)| m.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&c));
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[30] ^= 4;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Checksum { .. })
        ));
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10]),
            Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn load_into_checks_shape() {
        let c = sample();
        let mut wrong = Matrix::zeros(3, 2);
        assert!(matches!(
            c.load_into("a.weight", &mut wrong),
            Err(CheckpointError::Shape { .. })
        ));
        assert!(matches!(
            c.load_into("nope", &mut wrong),
            Err(CheckpointError::Missing(_))
        ));
    }
}
