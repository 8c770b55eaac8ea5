//! Binary container for fixed detector weights and prompt checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  b"TTAFORGE"
//! version u16
//! seed    u64
//! count   u32                          number of sections
//! then per section:
//!   tag_len u8, tag bytes (ASCII)
//!   rows u32, cols u32
//!   rows*cols f32 values, row-major
//! ```
//!
//! Values are stored as 32-bit floats. Matrices generated from a seed are
//! snapped to f32 at construction time, so a save/load round trip of fixed
//! weights is exact.

use std::fs;
use std::path::Path;

use crate::error::{Result, TtaError};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 8] = b"TTAFORGE";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Section {
    pub tag: String,
    pub matrix: Mat,
}

#[derive(Debug, Clone)]
pub struct Container {
    pub seed: u64,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new(seed: u64) -> Self {
        Container {
            seed,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, tag: &str, matrix: Mat) {
        self.sections.push(Section {
            tag: tag.to_string(),
            matrix,
        });
    }

    pub fn section(&self, tag: &str) -> Option<&Mat> {
        self.sections
            .iter()
            .find(|s| s.tag == tag)
            .map(|s| &s.matrix)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            let tag = s.tag.as_bytes();
            assert!(tag.len() <= u8::MAX as usize, "section tag too long");
            out.push(tag.len() as u8);
            out.extend_from_slice(tag);
            out.extend_from_slice(&(s.matrix.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(s.matrix.cols() as u32).to_le_bytes());
            for v in s.matrix.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(r.malformed("bad magic"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(r.malformed(&format!("unsupported version {version}")));
        }
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let tag_len = r.take(1)?[0] as usize;
            let tag = String::from_utf8(r.take(tag_len)?.to_vec())
                .map_err(|_| r.malformed("non-UTF8 section tag"))?;
            let rows = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let v = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
                data.push(v as f64);
            }
            sections.push(Section {
                tag,
                matrix: Mat::from_vec(rows, cols, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(r.malformed("trailing bytes after last section"));
        }
        Ok(Container { seed, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| TtaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TtaError::io(path, e))?;
        Container::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.malformed("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn malformed(&self, message: &str) -> TtaError {
        TtaError::MalformedFile {
            path: self.path.to_path_buf(),
            line: self.pos,
            message: message.to_string(),
        }
    }
}

/// Snap a value to the nearest f32 so serialized weights round-trip exactly.
pub fn snap_f32(v: f64) -> f64 {
    v as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn round_trip_preserves_f32_snapped_values() {
        let mut c = Container::new(42);
        let values = vec![1.5, -2.25, 0.0, 3.75, snap_f32(1e-3), -7.0];
        let m = Mat::from_vec(2, 3, values).unwrap();
        c.push("W0", m.clone());
        c.push("PT", Mat::zeros(3, 4));
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes, &PathBuf::from("mem")).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.sections.len(), 2);
        assert_eq!(back.section("W0").unwrap(), &m);
    }

    #[test]
    fn header_layout_is_fixed() {
        let c = Container::new(0x0102030405060708);
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], b"TTAFORGE");
        assert_eq!(u16::from_le_bytes([bytes[8], bytes[9]]), VERSION);
        assert_eq!(
            u64::from_le_bytes(bytes[10..18].try_into().unwrap()),
            0x0102030405060708
        );
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let c = Container::new(1);
        let mut bytes = c.to_bytes();
        bytes[0] = b'X';
        assert!(Container::from_bytes(&bytes, &PathBuf::from("m")).is_err());
        let good = Container::new(1).to_bytes();
        assert!(Container::from_bytes(&good[..10], &PathBuf::from("m")).is_err());
    }
}
