//! Binary parameter payload: `KTC1` magic, config digest, then a named
//! tensor list with little-endian shapes and values.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PARAM_MAGIC: &[u8; 4] = b"KTC1";

#[derive(Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.f64s(t.data());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        PayloadReader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated payload: need {} bytes at offset {}, {} left",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-utf8 string".into()))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(&shape, data)
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.is_at_end() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )))
        }
    }
}

/// Writes the header and every parameter value of `store`.
pub fn write_params(w: &mut PayloadWriter, store: &ParamStore, digest: &str) {
    w.bytes(PARAM_MAGIC);
    w.str(digest);
    w.u32(store.len() as u32);
    for p in store.iter() {
        w.str(&p.name);
        w.tensor(&p.value);
    }
}

/// Reads a parameter section and returns the stored digest together with
/// the named tensors in file order.
pub fn read_params(r: &mut PayloadReader<'_>) -> Result<(String, Vec<(String, Tensor)>)> {
    let magic = r.take(4).map_err(|_| Error::Checkpoint("missing header".into()))?;
    if magic != PARAM_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad header {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let digest = r.str()?;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let name = r.str()?;
        let t = r.tensor()?;
        out.push((name, t));
    }
    Ok((digest, out))
}

/// Copies named tensors into `store`, requiring an exact name/shape match.
pub fn restore_params(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "payload has {} parameters, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (p, (name, t)) in store.params_mut().iter_mut().zip(tensors) {
        if p.name != name || p.value.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` {:?} does not match stored `{}` {:?}",
                p.name,
                p.value.shape(),
                name,
                t.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}
