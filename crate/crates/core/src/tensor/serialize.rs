//! Binary checkpoint container.
//!
//! Layout: magic `EXPN`, format version u32, tensor count u32, then per
//! tensor: name length u32 + UTF-8 name, rank u32, dims as u64, and the raw
//! little-endian f64 payload. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EXPN";
pub const VERSION: u32 = 1;

/// One named tensor record.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_checkpoint(path: &Path, records: &[TensorRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for rec in records {
        let name = rec.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(rec.dims.len() as u32).to_le_bytes())?;
        for &d in &rec.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let numel: usize = rec.dims.iter().product();
        if numel != rec.data.len() {
            return Err(Error::contract(format!(
                "checkpoint record {}: dims {:?} vs {} values",
                rec.name,
                rec.dims,
                rec.data.len()
            )));
        }
        for &v in &rec.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: at,
            message: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<TensorRecord>> {
    let mut c = Cursor { inner: BufReader::new(File::open(path)?), offset: 0 };
    let mut magic = [0u8; 4];
    c.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}, expected EXPN") });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = c.u32("tensor count")?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        let at = c.offset;
        c.read_exact(&mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            offset: at,
            message: "tensor name is not UTF-8".to_string(),
        })?;
        let rank = c.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64("dim")? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = vec![0.0f64; numel];
        for v in data.iter_mut() {
            let mut b = [0u8; 8];
            c.read_exact(&mut b, "tensor data")?;
            *v = f64::from_le_bytes(b);
        }
        records.push(TensorRecord { name, dims, data });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let records = vec![
            TensorRecord {
                name: "w".to_string(),
                dims: vec![2, 3],
                data: vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -3.25, 0.1],
            },
            TensorRecord { name: "empty".to_string(), dims: vec![0], data: vec![] },
        ];
        write_checkpoint(&path, &records).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dims, b.dims);
            let bits_a: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        match read_checkpoint(&path).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        write_checkpoint(
            &path,
            &[TensorRecord { name: "w".to_string(), dims: vec![4], data: vec![1.0; 4] }],
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match read_checkpoint(&path).unwrap_err() {
            Error::Format { offset, message } => {
                assert!(offset > 0);
                assert!(message.contains("tensor data"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
