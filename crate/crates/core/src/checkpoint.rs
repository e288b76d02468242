//! Named-tensor checkpoint files.
//!
//! Layout: magic `GITO`, u32 version, u32 tensor count, then per tensor a
//! u32 name length, UTF-8 name, u32 rank, u64 dims and a little-endian
//! payload. Version 1 stores f32 payloads, version 2 f64. An optional
//! trailer (u32 length + UTF-8 text) carries key=value metadata.

use std::fs;
use std::path::Path;

use crate::error::{GitoError, Result};
use crate::tensor::{Precision, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"GITO";
pub const VERSION_F32: u32 = 1;
pub const VERSION_F64: u32 = 2;

/// Contents of a checkpoint file, payloads widened to f64.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f64>)>,
    pub metadata: String,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    /// Serializes with the payload width matching `precision`.
    pub fn to_bytes(&self, precision: Precision) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let version = match precision {
            Precision::F32 => VERSION_F32,
            Precision::F64 => VERSION_F64,
        };
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                match precision {
                    Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        if !self.metadata.is_empty() {
            out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
            out.extend_from_slice(self.metadata.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(r.malformed_at(0, "bad magic, expected GITO"));
        }
        let version = r.u32()?;
        let wide = match version {
            VERSION_F32 => false,
            VERSION_F64 => true,
            v => return Err(r.malformed_at(4, &format!("unsupported version {v}"))),
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos();
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.malformed_at(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let at = r.pos();
            let data = if wide { r.f64s(n)? } else { r.f32s(n)? };
            let t = Tensor::new(&shape, data)
                .map_err(|e| r.malformed_at(at, &format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        let metadata = if r.remaining() == 0 {
            String::new()
        } else {
            let at = r.pos();
            let len = r.u32()? as usize;
            let text = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.malformed_at(at, "metadata is not UTF-8"))?
                .to_string();
            if r.remaining() != 0 {
                return Err(r.malformed_at(r.pos(), "trailing bytes"));
            }
            text
        };
        Ok(Checkpoint { tensors, metadata })
    }

    pub fn save(&self, path: &Path, precision: Precision) -> Result<()> {
        let bytes = self.to_bytes(precision);
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Little-endian cursor that reports failures with their byte offset.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn malformed_at(&self, offset: usize, msg: &str) -> GitoError {
        GitoError::Malformed {
            offset: offset as u64,
            msg: msg.to_string(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.malformed_at(
                self.pos,
                &format!("unexpected end of data, need {n} bytes, have {}", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.malformed_at(self.pos, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.malformed_at(self.pos, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
/// Returns `(key, value, byte offset of the line)`.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            let Some((k, v)) = t.split_once('=') else {
                return Err(GitoError::Malformed {
                    offset: offset as u64,
                    msg: format!("expected key=value, got {t:?}"),
                });
            };
            out.push((k.trim().to_string(), v.trim().to_string(), offset));
        }
        offset += line.len();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push("a", &Tensor::new(&[2, 3], vec![1.0f64, -2.5, 3.25, 0.0, 1e-3, 7.0]).unwrap());
        c.push("b.weight", &Tensor::new(&[1], vec![0.1f64]).unwrap());
        c.metadata = "hidden_size=4\n".into();
        c
    }

    #[test]
    fn round_trip_both_widths() {
        let c = sample();
        let wide = Checkpoint::from_bytes(&c.to_bytes(Precision::F64)).unwrap();
        assert_eq!(wide, c);
        let narrow = Checkpoint::from_bytes(&c.to_bytes(Precision::F32)).unwrap();
        assert_eq!(narrow.get("b.weight").unwrap().data()[0], 0.1f32 as f64);
        assert_eq!(narrow.metadata, c.metadata);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes(Precision::F32);
        let err = Checkpoint::from_bytes(&bytes[..20]).unwrap_err();
        match err {
            GitoError::Malformed { offset, .. } => assert!(offset <= 20),
            e => panic!("unexpected {e}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(GitoError::Malformed { offset: 0, .. })
        ));
    }

    #[test]
    fn kv_parsing() {
        let kv = parse_kv("a=1\n# c\n\n b = x y \nbad\n").unwrap_err();
        assert!(matches!(kv, GitoError::Malformed { offset: 19, .. }));
        let kv = parse_kv("a=1\nb=2").unwrap();
        assert_eq!(kv[1], ("b".into(), "2".into(), 4));
    }
}
