//! Versioned binary container for model parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "AMPR" | version u32
//! header: len u32, UTF-8 JSON text
//! vocabulary: count u32, then per token: len u32, UTF-8 bytes, freq u64
//! parameters: count u32, then per block:
//!     name len u32, UTF-8 name, dtype u8 (1 = f64), ndim u32, dims u64 * ndim,
//!     values (8 bytes each)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"AMPR";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: String,
    /// Tokens and their frequencies; empty for probe checkpoints.
    pub vocab: Vec<(String, u64)>,
    pub params: Vec<(String, Tensor)>,
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub(crate) fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> Error {
        Error::format(self.path, format!("{} (offset {})", message.into(), self.pos))
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.error("invalid UTF-8 string"))
    }
}

fn write_params<'a, I>(w: &mut Writer, params: I)
where
    I: ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
{
    w.u32(params.len() as u32);
    for (name, t) in params {
        w.str(name);
        w.u8(DTYPE_F64);
        w.u32(t.rank() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
}

/// SHA-256 over the serialized parameter blocks, hex encoded.
pub fn fingerprint<'a, I>(params: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
    I::IntoIter: ExactSizeIterator,
{
    let mut w = Writer::new();
    write_params(&mut w, params.into_iter());
    hex(&Sha256::digest(w.finish()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&self.header);
        w.u32(self.vocab.len() as u32);
        for (tok, freq) in &self.vocab {
            w.str(tok);
            w.u64(*freq);
        }
        write_params(&mut w, self.params.iter().map(|(n, t)| (n.as_str(), t)));
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(4)? != MAGIC {
            return Err(r.error("bad magic, not a model checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let header = r.str()?;
        let n_vocab = r.u32()? as usize;
        let mut vocab = Vec::with_capacity(n_vocab);
        for _ in 0..n_vocab {
            let tok = r.str()?;
            let freq = r.u64()?;
            vocab.push((tok, freq));
        }
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.str()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(r.error(format!("unsupported dtype {dtype} for {name}")));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.f64()?);
            }
            let t = Tensor::new(shape, data).map_err(|e| r.error(e.to_string()))?;
            params.push((name, t));
        }
        if !r.at_end() {
            return Err(r.error("trailing bytes after parameter blocks"));
        }
        Ok(Container {
            header,
            vocab,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self.params.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Input(format!("checkpoint has no parameter {name:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            header in "[a-z{}\":, ]{0,40}",
            values in proptest::collection::vec(proptest::num::f64::ANY, 1..20),
            vocab in proptest::collection::vec(("[a-zé<>]{1,6}", any::<u64>()), 0..5),
        ) {
            let n = values.len();
            let c = Container {
                header,
                vocab,
                params: vec![
                    ("w".into(), Tensor::new(vec![n], values.clone()).unwrap()),
                    ("s".into(), Tensor::scalar(-0.0)),
                ],
            };
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            for (a, b) in back.params[0].1.data().iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let c = Container {
            header: "{}".into(),
            vocab: vec![],
            params: vec![("b".into(), Tensor::zeros(&[3]))],
        };
        let mut bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        bytes[0] = b'X';
        assert!(matches!(
            Container::from_bytes(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn fingerprint_tracks_values() {
        let (za, zb) = (Tensor::zeros(&[2]), Tensor::filled(&[2], 1e-300));
        let a = [("w", &za)];
        let b = [("w", &zb)];
        assert_ne!(fingerprint(a), fingerprint(b));
        assert_eq!(fingerprint(a).len(), 64);
    }
}
