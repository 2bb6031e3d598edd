//! Little-endian binary containers shared by the dataset, model and
//! checkpoint files. Every container starts with a 4-byte magic and a
//! `u32` format version.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} at byte {offset} (expected {expected})")]
    BadVersion {
        offset: usize,
        expected: u32,
        found: u32,
    },
    #[error("truncated input at byte {offset}: expected {expected} bytes total, got {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("invalid content at byte {offset}: {reason}")]
    Invalid { offset: usize, reason: String },
    #[error("{extra} trailing bytes after byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
}

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
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

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    /// Length-prefixed nested blob.
    pub fn blob(&mut self, bytes: &[u8]) {
        self.u64(bytes.len() as u64);
        self.buf.extend_from_slice(bytes);
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Check magic and version, leaving the cursor after the header.
    pub fn open(buf: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self, FormatError> {
        let mut r = Self { buf, pos: 0 };
        let found = r.take(4)?;
        if found != magic {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let offset = r.pos;
        let v = r.u32()?;
        if v != version {
            return Err(FormatError::BadVersion {
                offset,
                expected: version,
                found: v,
            });
        }
        Ok(r)
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Invalid {
            offset: self.pos,
            reason: "length overflow".into(),
        })?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated {
                offset: self.pos,
                expected: end,
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize, FormatError> {
        let offset = self.pos;
        usize::try_from(self.u64()?).map_err(|_| FormatError::Invalid {
            offset,
            reason: "count exceeds address space".into(),
        })
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = n.checked_mul(8).ok_or(FormatError::Invalid {
            offset: self.pos,
            reason: "length overflow".into(),
        })?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn str(&mut self) -> Result<String, FormatError> {
        let len = self.u32()? as usize;
        let offset = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|e| FormatError::Invalid {
            offset,
            reason: format!("name is not UTF-8: {e}"),
        })
    }

    pub fn blob(&mut self) -> Result<&'a [u8], FormatError> {
        let len = self.usize()?;
        self.take(len)
    }

    pub fn invalid(&self, reason: impl Into<String>) -> FormatError {
        FormatError::Invalid {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::TrailingBytes {
                offset: self.pos,
                extra: self.buf.len() - self.pos,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_scalars_round_trip() {
        let mut w = Writer::new(b"TEST", 3);
        w.u8(7);
        w.u64(1 << 40);
        w.f64(-0.0);
        w.str("jet1_E");
        let bytes = w.into_bytes();
        let mut r = Reader::open(&bytes, b"TEST", 3).unwrap();
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.u64().unwrap(), 1 << 40);
        assert_eq!(r.f64().unwrap().to_bits(), (-0.0f64).to_bits());
        assert_eq!(r.str().unwrap(), "jet1_E");
        r.finish().unwrap();
    }

    #[test]
    fn wrong_magic_and_version() {
        let bytes = Writer::new(b"ABCD", 1).into_bytes();
        assert!(matches!(Reader::open(&bytes, b"ABCE", 1), Err(FormatError::BadMagic { .. })));
        assert!(matches!(
            Reader::open(&bytes, b"ABCD", 2),
            Err(FormatError::BadVersion { offset: 4, found: 1, .. })
        ));
    }

    #[test]
    fn truncation_reports_offsets() {
        let mut w = Writer::new(b"ABCD", 1);
        w.f64(1.0);
        let bytes = w.into_bytes();
        let mut r = Reader::open(&bytes[..12], b"ABCD", 1).unwrap();
        assert_eq!(
            r.f64(),
            Err(FormatError::Truncated {
                offset: 8,
                expected: 16,
                actual: 12
            })
        );
    }
}
