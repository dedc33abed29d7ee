//! Binary tensor container shared by checkpoints and frame files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      9 bytes  "POLYADAPT"
//! version    u32
//! meta_len   u32      followed by meta_len bytes of UTF-8 "key=value\n" lines
//! count      u32
//! count × { name_len u32, name bytes, rank u32, dims u32 × rank, offset u64 }
//! payload    f32 values, row-major, each tensor starting at its offset
//! ```
//!
//! Offsets are relative to the start of the payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 9] = b"POLYADAPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// A short buffer surfaces as an I/O error (unexpected end of file).
fn truncated(msg: String) -> Error {
    Error::io("<buffer>", std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("truncated: {msg}")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(truncated(format!(
                "need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 in header".into()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = String::new();
        for (k, v) in &self.meta {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        out.reserve(offset as usize);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("bad magic: not a POLYADAPT container".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = r.string(meta_len)?;
        let mut meta = Vec::new();
        for line in meta_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad meta line {line:?}")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = r.string(len)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            index.push((name, shape, offset));
        }
        let payload = &buf[r.pos..];
        let mut tensors = Vec::with_capacity(count);
        for (name, shape, offset) in index {
            let bytes = 4 * numel(&shape);
            if offset + bytes > payload.len() {
                return Err(truncated(format!(
                    "payload for tensor {name} needs bytes {offset}..{}, have {}",
                    offset + bytes,
                    payload.len()
                )));
            }
            let data = payload[offset..offset + bytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

/// Writes a `[T, F]` frame matrix as a single-tensor container.
pub fn save_frames(path: &Path, frames: &Tensor<f32>) -> Result<()> {
    let mut c = Checkpoint::new();
    c.set_meta("kind", "frames");
    c.tensors.push(("frames".to_string(), frames.clone()));
    c.save(path)
}

pub fn load_frames(path: &Path) -> Result<Tensor<f32>> {
    let c = Checkpoint::load(path)?;
    c.tensor("frames")
        .cloned()
        .ok_or_else(|| Error::Checkpoint(format!("{}: no frames tensor", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("kind", "test");
        c.tensors.push(("a".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap()));
        c.tensors.push(("b.c".into(), Tensor::new(vec![3], vec![1e-30, 2.0, -7.25]).unwrap()));
        c
    }

    #[test]
    fn header_starts_with_magic() {
        let b = sample().to_bytes();
        assert_eq!(&b[..9], b"POLYADAPT");
        assert_eq!(u32::from_le_bytes(b[9..13].try_into().unwrap()), FORMAT_VERSION);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut b = sample().to_bytes();
        let good = b.clone();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(_))));
        let mut v = good.clone();
        v[9] = 9;
        assert!(Checkpoint::from_bytes(&v).unwrap_err().to_string().contains("version"));
        let cut = &good[..good.len() - 3];
        let e = Checkpoint::from_bytes(cut).unwrap_err();
        assert!(matches!(e, Error::Io { .. }) && e.to_string().contains("truncated"));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f32>(), 1..64), rows in 1usize..4) {
            let n = values.len() / rows * rows;
            prop_assume!(n > 0);
            let t = Tensor::new(vec![rows, n / rows], values[..n].to_vec()).unwrap();
            let mut c = Checkpoint::new();
            c.tensors.push(("t".into(), t.clone()));
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            let got = back.tensor("t").unwrap();
            prop_assert_eq!(got.shape(), t.shape());
            prop_assert!(got.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
