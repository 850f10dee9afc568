//! Little-endian reader/writer helpers for the binary file formats.

use crate::error::FormatError;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &'static str) -> Result<(), FormatError> {
        let n = expected.len().min(self.buf.len());
        let found = &self.buf[..n];
        if found != expected.as_bytes() {
            return Err(FormatError::BadMagic {
                expected,
                found: found.to_vec(),
            });
        }
        self.pos = n;
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn version(&mut self, expected: u32) -> Result<(), FormatError> {
        let offset = self.pos;
        let found = self.u32()?;
        if found != expected {
            return Err(FormatError::Version {
                offset,
                expected,
                found,
            });
        }
        Ok(())
    }

    /// A u32 header field that must be positive.
    pub(crate) fn positive(&mut self, field: &'static str) -> Result<u32, FormatError> {
        let offset = self.pos;
        let v = self.u32()?;
        if v == 0 {
            return Err(FormatError::InvalidHeader {
                field,
                offset,
                value: 0,
            });
        }
        Ok(v)
    }

    pub(crate) fn finish(self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::TrailingBytes {
                offset: self.pos,
                count: self.buf.len() - self.pos,
            });
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Lengths are written as u32; anything larger cannot be represented.
pub(crate) fn len_u32(field: &'static str, n: usize) -> Result<u32, FormatError> {
    u32::try_from(n).map_err(|_| FormatError::InvalidHeader {
        field,
        offset: 0,
        value: n as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_little_endian_and_reports_offsets() {
        let bytes = [b'A', b'B', 1, 0, 0, 0, 0, 0];
        let mut r = Reader::new(&bytes);
        r.magic("AB").unwrap();
        assert_eq!(r.u32().unwrap(), 1);
        assert_eq!(
            r.u32(),
            Err(FormatError::Truncated {
                offset: 6,
                needed: 4,
                available: 2
            })
        );
        let mut r = Reader::new(&bytes);
        assert!(matches!(r.magic("XY"), Err(FormatError::BadMagic { expected: "XY", .. })));
        let mut r = Reader::new(&bytes[..3]);
        r.take(2).unwrap();
        assert_eq!(r.finish(), Err(FormatError::TrailingBytes { offset: 2, count: 1 }));
    }
}
