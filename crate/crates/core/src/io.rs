//! Little-endian binary containers.
//!
//! Named-tensor container (`APTW`, version 1):
//!
//! ```text
//! magic "APTW" | version u32 | tensor_count u32 |
//!   per tensor: name_len u16 | name (UTF-8) | rank u8 | dims u32 × rank |
//!               data f32 × numel (row-major)
//! ```
//!
//! Values are stored as `f32`; anything held at higher precision is rounded
//! on write.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"APTW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Sequential little-endian reader that reports truncation distinctly.
pub(crate) struct LeReader<R> {
    inner: R,
    what: &'static str,
}

impl<R: Read> LeReader<R> {
    pub(crate) fn new(inner: R, what: &'static str) -> Self {
        Self { inner, what }
    }

    pub(crate) fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    pub(crate) fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Truncated(self.what.to_string()),
            _ => Error::Io(e),
        })
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut raw = vec![0u8; n * 4];
        self.fill(&mut raw)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub(crate) fn expect_header(&mut self, magic: [u8; 4], version: u32) -> Result<()> {
        let found = self.bytes::<4>()?;
        if found != magic {
            return Err(Error::BadMagic {
                expected: magic,
                found,
            });
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::Version {
                expected: version,
                found: v,
            });
        }
        Ok(())
    }

    /// Succeeds only when the stream is exhausted.
    pub(crate) fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format(format!("trailing bytes after {}", self.what))),
        }
    }
}

pub(crate) fn put_f32s<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    let mut raw = Vec::with_capacity(data.len() * 4);
    for v in data {
        raw.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&raw)?;
    Ok(())
}

/// Serialises named tensors into an `APTW` byte stream.
pub fn write_tensors<W: Write>(w: &mut W, tensors: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(&WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::Format("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Format(format!("rank too large for {name}")))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim too large in {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        put_f32s(w, t.data())?;
    }
    Ok(())
}

/// Parses an `APTW` byte stream.
pub fn read_tensors<R: Read>(r: R) -> Result<Vec<(String, Tensor)>> {
    let mut r = LeReader::new(r, "weight file");
    r.expect_header(WEIGHTS_MAGIC, WEIGHTS_VERSION)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let mut name = vec![0u8; len];
        r.fill(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("non UTF-8 tensor name".into()))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f32s(numel)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    r.expect_end()?;
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_tensors(BufReader::new(File::open(path)?))
}

/// Removes and returns the tensor called `name`.
pub(crate) fn take_named(list: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    let pos = list
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
    Ok(list.remove(pos).1)
}
