//! LTNS binary tensor blobs.
//!
//! Layout (little-endian): `b"LTNS"`, version `u32 = 1`, dtype `u8`
//! (1 = single, 2 = double), ndim `u8`, `ndim × u64` dims, then the
//! row-major payload.

use std::io::Write;

use thiserror::Error;

use super::{DType, Scalar, Tensor};

pub const LTNS_MAGIC: &[u8; 4] = b"LTNS";
pub const LTNS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at byte {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: String,
        found: String,
    },
    #[error("unsupported version {version} at byte {offset}")]
    BadVersion { offset: usize, version: u32 },
    #[error("truncated input at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid content at byte {offset}: {msg}")]
    Invalid { offset: usize, msg: String },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Cursor over a byte slice that reports offsets in its errors.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let offset = self.pos;
        let found = self.take(4)?;
        if found != expected {
            return Err(FormatError::BadMagic {
                offset,
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<u32, FormatError> {
        let offset = self.pos;
        let v = self.u32()?;
        if v != expected {
            return Err(FormatError::BadVersion { offset, version: v });
        }
        Ok(v)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn invalid(&self, msg: impl Into<String>) -> FormatError {
        FormatError::Invalid {
            offset: self.pos,
            msg: msg.into(),
        }
    }
}

pub fn encode_ltns<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(LTNS_MAGIC);
    out.extend_from_slice(&LTNS_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.len() * T::DTYPE.size_of());
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Decodes one blob. A blob stored in the other precision is converted.
pub fn decode_ltns<T: Scalar>(r: &mut ByteReader<'_>) -> Result<Tensor<T>, FormatError> {
    r.magic(LTNS_MAGIC)?;
    r.version(LTNS_VERSION)?;
    let code = r.u8()?;
    let dtype = DType::from_code(code).ok_or_else(|| r.invalid(format!("unknown dtype code {code}")))?;
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.invalid("element count overflows"))?;
    let bytes = r.take(
        n.checked_mul(dtype.size_of())
            .ok_or_else(|| r.invalid("payload size overflows"))?,
    )?;
    let data: Vec<T> = match dtype {
        DType::Single => bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::read_le(c) as f64))
            .collect(),
        DType::Double => bytes.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    Ok(Tensor::new(&shape, data).expect("length matches shape by construction"))
}

pub fn write_ltns<T: Scalar, W: Write>(t: &Tensor<T>, w: &mut W) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    encode_ltns(t, &mut buf);
    w.write_all(&buf)?;
    Ok(())
}
