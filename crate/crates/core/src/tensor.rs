//! `WST1` tensor container.
//!
//! Layout: the magic bytes `WST1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dims, then the values as little-endian `f32` in
//! row-major order. Nothing follows the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WST1";

/// Refuse absurd ranks before allocating anything for them.
const MAX_RANK: u32 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let expected = element_count(&dims)?;
        if expected != data.len() {
            return Err(Error::format(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<u32>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::format(format!("bad magic {magic:?}, expected WST1")));
        }
        let rank = read_u32(&mut r, "rank")?;
        if rank > MAX_RANK {
            return Err(Error::format(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let dims = (0..rank)
            .map(|_| read_u32(&mut r, "dims"))
            .collect::<Result<Vec<_>>>()?;
        let n = element_count(&dims)?;
        let mut raw = Vec::new();
        r.take(4 * n as u64 + 1).read_to_end(&mut raw)?;
        if raw.len() < 4 * n {
            return Err(Error::format(format!(
                "truncated payload: {} of {} bytes",
                raw.len(),
                4 * n
            )));
        }
        if raw.len() > 4 * n {
            return Err(Error::format("trailing bytes after payload"));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Checks the rank and returns the dims as `usize`.
    pub fn expect_rank(&self, rank: usize) -> Result<Vec<usize>> {
        if self.rank() != rank {
            return Err(Error::format(format!(
                "expected rank-{rank} tensor, found rank {}",
                self.rank()
            )));
        }
        Ok(self.dims.iter().map(|&d| d as usize).collect())
    }
}

fn element_count(dims: &[u32]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d as usize)
            .filter(|n| *n <= (u32::MAX as usize))
            .ok_or_else(|| Error::format(format!("tensor dims {dims:?} too large")))
    })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(format!("truncated header ({what})"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
