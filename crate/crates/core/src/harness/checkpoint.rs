//! Binary checkpoint format.
//!
//! ```text
//! "SSNC"                      4 bytes
//! version                     u16 LE (currently 1)
//! element width               u8 (4 = f32, 8 = f64)
//! then, until end of file, one record per tensor:
//!   name length               u32 LE
//!   name                      UTF-8 bytes
//!   rank                      u32 LE
//!   extents                   rank × u64 LE
//!   values                    product(extents) × element width, LE
//! ```
//!
//! Records appear in the model's parameter visiting order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::scalar::{ElementWidth, Scalar};

pub const MAGIC: &[u8; 4] = b"SSNC";
pub const VERSION: u16 = 1;

/// A decoded checkpoint record with values kept as raw bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub raw: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub width: ElementWidth,
    pub records: Vec<Record>,
}

pub fn to_bytes<T: Scalar, M: Parameters<T> + ?Sized>(model: &M) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::WIDTH.tag());
    model.visit_params("", &mut |name, t| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    });
    out
}

pub fn save<T: Scalar, M: Parameters<T> + ?Sized>(model: &M, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not an SSNC file)".into()));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let tag = r.take(1, "element width")?[0];
    let width = ElementWidth::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown element width tag {tag}")))?;
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(tag as usize))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
        let raw = r.take(count, "values")?.to_vec();
        records.push(Record { name, shape, raw });
    }
    Ok(Checkpoint { width, records })
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

impl Checkpoint {
    /// Overwrites the parameters of `model`. Names, order, shapes and element
    /// width must all match.
    pub fn load_into<T: Scalar, M: Parameters<T> + ?Sized>(&self, model: &mut M) -> Result<()> {
        if self.width != T::WIDTH {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} values, model uses {}",
                self.width,
                T::WIDTH
            )));
        }
        let expected = model.named_shapes();
        if expected.len() != self.records.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.records.len(),
                expected.len()
            )));
        }
        for (rec, (name, shape)) in self.records.iter().zip(&expected) {
            if &rec.name != name || &rec.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: checkpoint {} {:?}, model {name} {shape:?}",
                    rec.name, rec.shape
                )));
            }
        }
        let w = self.width.tag() as usize;
        let mut i = 0;
        model.visit_params_mut("", &mut |_, t| {
            let raw = &self.records[i].raw;
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                *v = T::read_le(&raw[k * w..(k + 1) * w]);
            }
            i += 1;
        });
        Ok(())
    }
}

pub fn load_into<T: Scalar, M: Parameters<T> + ?Sized>(model: &mut M, path: &Path) -> Result<()> {
    read(path)?.load_into(model)
}
