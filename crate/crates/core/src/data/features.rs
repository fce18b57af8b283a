//! Region-feature container: the bridge format for precomputed visual
//! features.
//!
//! Layout: magic `EXPF`, version u32, image count u64; per image: id u64,
//! N u32, d u32, then N·d little-endian f32 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::SceneSample;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EXPF";
pub const VERSION: u32 = 1;

/// One image's variable-length feature matrix, in storage precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: u64,
    /// N rows of d values each.
    pub features: Vec<Vec<f32>>,
}

impl FeatureRecord {
    pub fn d(&self) -> usize {
        self.features.first().map_or(0, |r| r.len())
    }
}

pub fn write_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for rec in records {
        let d = rec.d();
        if rec.features.iter().any(|r| r.len() != d) {
            return Err(Error::contract(format!("image {}: ragged feature rows", rec.id)));
        }
        w.write_all(&rec.id.to_le_bytes())?;
        w.write_all(&(rec.features.len() as u32).to_le_bytes())?;
        w.write_all(&(d as u32).to_le_bytes())?;
        for row in &rec.features {
            for &v in row {
                w.write_all(&v.to_le_bytes())?;
            }
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
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let mut c = Cursor { inner: BufReader::new(File::open(path)?), offset: 0 };
    let mut magic = [0u8; 4];
    c.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected EXPF"),
        });
    }
    let mut b4 = [0u8; 4];
    c.read_exact(&mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let mut b8 = [0u8; 8];
    c.read_exact(&mut b8, "image count")?;
    let count = u64::from_le_bytes(b8);

    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        c.read_exact(&mut b8, "image id")?;
        let id = u64::from_le_bytes(b8);
        c.read_exact(&mut b4, "row count")?;
        let n = u32::from_le_bytes(b4) as usize;
        c.read_exact(&mut b4, "feature width")?;
        let d = u32::from_le_bytes(b4) as usize;
        let mut features = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = Vec::with_capacity(d);
            for _ in 0..d {
                c.read_exact(&mut b4, "feature value")?;
                row.push(f32::from_le_bytes(b4));
            }
            features.push(row);
        }
        records.push(FeatureRecord { id, features });
    }
    Ok(records)
}

/// Lossless read as scene samples (features only; no references).
pub fn load_features(path: &Path) -> Result<Vec<SceneSample>> {
    Ok(read_features(path)?
        .into_iter()
        .map(|rec| SceneSample {
            id: rec.id,
            features: rec
                .features
                .into_iter()
                .map(|row| row.into_iter().map(f64::from).collect())
                .collect(),
            refs: Vec::new(),
        })
        .collect())
}
