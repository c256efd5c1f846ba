//! Little-endian binary container shared by feature files, parameter
//! checkpoints and retrieval indexes.
//!
//! ```text
//! version 1 (single matrix):
//!   "PRVF" | version u32 = 1 | rows u32 | cols u32 | rows*cols f32
//! version 2 (named sections):
//!   "PRVF" | version u32 = 2 | count u32 |
//!   count × ( name_len u32 | name utf-8 | dtype u32 | rows u32 | cols u32 | payload )
//!   dtype 1 = f32, 2 = f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"PRVF";
pub const FEATURE_VERSION: u32 = 1;
pub const SECTIONS_VERSION: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u32 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::Validation(format!("unknown section dtype {other}"))),
        }
    }
}

/// A named matrix stored in a version-2 container.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub dtype: Dtype,
    pub tensor: Tensor,
}

/// Rounds through `f32`, the precision of feature payloads.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn dim_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} exceeds u32")))
}

fn push_payload(buf: &mut Vec<u8>, t: &Tensor, dtype: Dtype) {
    match dtype {
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: n,
                found: self.bytes.len() - self.pos,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn header(&mut self) -> Result<u32> {
        if self.bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: 4,
                found: self.bytes.len(),
            });
        }
        let magic = self.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
        }
        self.u32()
    }

    fn matrix(&mut self, rows: usize, cols: usize, dtype: Dtype) -> Result<Tensor> {
        let n = rows * cols;
        let raw = self.take(n * dtype.width())?;
        let data: Vec<f64> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        };
        Tensor::new(vec![rows, cols], data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::DimMismatch(format!(
                "{} trailing bytes after the declared payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_features(matrix: &Tensor) -> Result<Vec<u8>> {
    let (rows, cols) = (matrix.rows(), matrix.cols());
    let mut buf = Vec::with_capacity(16 + 4 * matrix.numel());
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, FEATURE_VERSION);
    push_u32(&mut buf, dim_u32(rows, "rows")?);
    push_u32(&mut buf, dim_u32(cols, "cols")?);
    push_payload(&mut buf, matrix, Dtype::F32);
    Ok(buf)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    let version = r.header()?;
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let expected = rows * cols * 4;
    let found = bytes.len().saturating_sub(r.pos);
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    let t = r.matrix(rows, cols, Dtype::F32)?;
    r.finish()?;
    Ok(t)
}

/// Writes a matrix as a version-1 feature file (payload rounded to `f32`).
pub fn write_features(path: &Path, matrix: &Tensor) -> Result<()> {
    let bytes = encode_features(matrix)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

pub fn encode_sections(sections: &[Section]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, SECTIONS_VERSION);
    push_u32(&mut buf, dim_u32(sections.len(), "section count")?);
    for s in sections {
        let name = s.name.as_bytes();
        push_u32(&mut buf, dim_u32(name.len(), "name length")?);
        buf.extend_from_slice(name);
        push_u32(&mut buf, s.dtype.code());
        push_u32(&mut buf, dim_u32(s.tensor.rows(), "rows")?);
        push_u32(&mut buf, dim_u32(s.tensor.cols(), "cols")?);
        push_payload(&mut buf, &s.tensor, s.dtype);
    }
    Ok(buf)
}

pub fn decode_sections(bytes: &[u8]) -> Result<Vec<Section>> {
    let mut r = Reader { bytes, pos: 0 };
    let version = r.header()?;
    if version != SECTIONS_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Validation("section name is not utf-8".into()))?;
        let dtype = Dtype::from_code(r.u32()?)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let tensor = r.matrix(rows, cols, dtype)?;
        out.push(Section { name, dtype, tensor });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_sections(path: &Path, sections: &[Section]) -> Result<()> {
    let bytes = encode_sections(sections)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_sections(path: &Path) -> Result<Vec<Section>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sections(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::matrix(3, 4, (0..12).map(|i| round_f32(i as f64 * 0.1 - 0.3)).collect()).unwrap()
    }

    #[test]
    fn feature_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.prvf");
        write_features(&p, &sample()).unwrap();
        assert_eq!(load_features(&p).unwrap(), sample());
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_features(&sample()).unwrap();
        bytes[0] = b'X';
        let err = decode_features(&bytes).unwrap_err();
        assert!(matches!(err, Error::BadMagic(_)));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn truncated_payload() {
        let m = Tensor::zeros(vec![10, 2]);
        let bytes = encode_features(&m).unwrap();
        // drop the last row
        let err = decode_features(&bytes[..bytes.len() - 8]).unwrap_err();
        assert!(matches!(
            err,
            Error::Truncated {
                expected: 80,
                found: 72
            }
        ));
    }

    #[test]
    fn trailing_bytes_are_a_dim_mismatch() {
        let mut bytes = encode_features(&sample()).unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode_features(&bytes), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn missing_file_is_missing_input() {
        let err = load_features(Path::new("/nonexistent/feats.prvf")).unwrap_err();
        assert!(matches!(err, Error::MissingInput(_)));
    }

    #[test]
    fn sections_roundtrip_both_dtypes() {
        let precise = Tensor::matrix(1, 2, vec![0.1, 1.0 / 3.0]).unwrap();
        let sections = vec![
            Section {
                name: "a".into(),
                dtype: Dtype::F64,
                tensor: precise.clone(),
            },
            Section {
                name: "frames:v0001".into(),
                dtype: Dtype::F32,
                tensor: sample(),
            },
        ];
        let bytes = encode_sections(&sections).unwrap();
        assert_eq!(decode_sections(&bytes).unwrap(), sections);
        assert!(matches!(decode_features(&bytes), Err(Error::UnsupportedVersion(2))));
    }
}
