//! Little-endian byte helpers shared by the dataset, checkpoint and stage
//! snapshot formats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::Contract(format!("{v} does not fit the u32 field")))?;
        self.u32(v);
        Ok(())
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
            }
        }
        fs::write(path, self.buf).map_err(|e| Error::file(path, e))
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn parse_error(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.offset(),
            reason: reason.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.parse_error(format!(
                "unexpected end of file, needed {n} more bytes, {} left",
                self.buf.len() - self.pos
            ))),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn usize32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    /// Guards allocations driven by header fields against the bytes that
    /// are actually left in the buffer.
    pub fn expect_remaining(&self, n_bytes: usize, what: &str) -> Result<()> {
        if n_bytes > self.buf.len() - self.pos {
            return Err(self.parse_error(format!(
                "{what} needs {n_bytes} bytes, only {} left",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }

    pub fn magic(&mut self, expected: &[u8; 4], version: u16) -> Result<()> {
        let found = self.take(4).map_err(|_| {
            Error::Version(format!(
                "file too short for the {} header",
                String::from_utf8_lossy(expected)
            ))
        })?;
        if found != expected {
            return Err(Error::Version(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(expected)
            )));
        }
        let v = self.u16()?;
        if v != version {
            return Err(Error::Version(format!(
                "{} format version {v}, this build reads version {version}",
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.parse_error(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::file(path, e))
}
