//! Little-endian binary helpers shared by the checkpoint, dataset and
//! latent file formats.

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a {0} file")]
    BadMagic(&'static str),
    #[error("unsupported {format} version {found} (expected {expected})")]
    Version { format: &'static str, found: u32, expected: u32 },
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0}")]
    Malformed(String),
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if n > self.buf.len() - self.pos {
            return Err(FormatError::Truncated {
                expected: self.pos.saturating_add(n),
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Checks the four-byte magic and the version that follows it.
    pub fn header(&mut self, magic: &'static [u8; 4], format: &'static str, version: u32) -> Result<(), FormatError> {
        if self.buf.len() < 4 || &self.buf[..4] != magic {
            return Err(FormatError::BadMagic(format));
        }
        self.pos = 4;
        let found = self.u32()?;
        if found != version {
            return Err(FormatError::Version {
                format,
                found,
                expected: version,
            });
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| FormatError::Malformed(format!("{n} floats overflow the address space")))?;
        let b = self.take(bytes)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) fn len_u32(n: usize) -> Result<u32, FormatError> {
    u32::try_from(n).map_err(|_| FormatError::Malformed(format!("length {n} exceeds u32")))
}
