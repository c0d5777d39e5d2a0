//! AFT array files: one matrix of per-frame features or responses.
//!
//! ```text
//! b"AFT1"  u32 version  u8 dtype (4 = f32, 8 = f64)  u32 rows  u32 cols
//! f64 rate_hz  u32 subject_id  u32 n + n bytes UTF-8 episode_id
//! rows·cols values, row-major
//! ```
//!
//! Everything is little-endian. `f32` payloads are widened to `f64` on read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorcore::Matrix;

const MAGIC: &[u8; 4] = b"AFT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            4 => Ok(Dtype::F32),
            8 => Ok(Dtype::F64),
            t => Err(fmt_err(format!("unknown dtype tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AftFile {
    pub dtype: Dtype,
    pub rate_hz: f64,
    pub subject_id: u32,
    pub episode_id: String,
    pub data: Matrix,
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "AFT",
        detail: detail.into(),
    }
}

impl AftFile {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let rows = u32::try_from(self.data.rows()).map_err(|_| fmt_err("too many rows"))?;
        let cols = u32::try_from(self.data.cols()).map_err(|_| fmt_err("too many columns"))?;
        let id = self.episode_id.as_bytes();
        let id_len = u32::try_from(id.len()).map_err(|_| fmt_err("episode id too long"))?;
        let mut buf = Vec::with_capacity(37 + id.len() + self.data.len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(self.dtype.tag());
        buf.extend_from_slice(&rows.to_le_bytes());
        buf.extend_from_slice(&cols.to_le_bytes());
        buf.extend_from_slice(&self.rate_hz.to_le_bytes());
        buf.extend_from_slice(&self.subject_id.to_le_bytes());
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(id);
        for &v in self.data.as_slice() {
            match self.dtype {
                Dtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
        w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| fmt_err(e.to_string()))
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| fmt_err(e.to_string()))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let dtype = Dtype::from_tag(cur.take(1)?[0])?;
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let rate_hz = f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        let subject_id = cur.u32()?;
        let id_len = cur.u32()? as usize;
        let episode_id = String::from_utf8(cur.take(id_len)?.to_vec()).map_err(|_| fmt_err("episode id is not UTF-8"))?;
        let width = dtype.tag() as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| fmt_err("shape overflows"))?;
        let payload = cur.take(n.checked_mul(width).ok_or_else(|| fmt_err("shape overflows"))?)?;
        if cur.pos != bytes.len() {
            return Err(fmt_err(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        let data: Vec<f64> = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        Ok(Self {
            dtype,
            rate_hz,
            subject_id,
            episode_id,
            data: Matrix::from_vec(rows, cols, data)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| fmt_err("truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::rng;

    fn sample(dtype: Dtype) -> AftFile {
        let mut r = rng::seeded(2);
        AftFile {
            dtype,
            rate_hz: 2.0,
            subject_id: 3,
            episode_id: "s01e02ä".into(),
            data: Matrix::from_vec(5, 3, rng::normal_vec(&mut r, 15, 1.0)).unwrap(),
        }
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let a = sample(Dtype::F64);
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let b = AftFile::read_from(buf.as_slice()).unwrap();
        assert_eq!(a, b);
        let mut again = Vec::new();
        b.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn f32_round_trip_is_bit_exact_after_widening() {
        let mut a = sample(Dtype::F32);
        a.data.as_mut_slice().iter_mut().for_each(|v| *v = *v as f32 as f64);
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 1 + 4 + 4 + 8 + 4 + 4 + a.episode_id.len() + 15 * 4);
        let b = AftFile::read_from(buf.as_slice()).unwrap();
        assert_eq!(a, b);
        let mut again = Vec::new();
        b.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let mut buf = Vec::new();
        sample(Dtype::F64).write_to(&mut buf).unwrap();
        assert!(AftFile::read_from(&buf[..buf.len() - 1]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(AftFile::read_from(long.as_slice()).is_err());
        let mut magic = buf.clone();
        magic[3] = b'2';
        assert!(AftFile::read_from(magic.as_slice()).is_err());
        let mut tag = buf;
        tag[8] = 2;
        assert!(AftFile::read_from(tag.as_slice()).is_err());
    }
}
