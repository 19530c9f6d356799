//! The `CBEVTNSR` tensor container: magic, version, dtype, ndim, dims,
//! then the f32 payload, all little-endian and row-major.

use std::fs;
use std::path::Path;

use cbev_core::Tensor;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"CBEVTNSR";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {} (wanted {n} more)", self.at))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a container; the message names the first problem found.
pub fn decode(bytes: &[u8]) -> Result<Tensor, String> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic, not a CBEVTNSR file".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dtype = r.u32()?;
    if dtype != DTYPE_F32 {
        return Err(format!("unsupported dtype code {dtype}"));
    }
    let ndim = r.u32()? as usize;
    if ndim > 8 {
        return Err(format!("implausible rank {ndim}"));
    }
    let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("element count overflows")?;
    let payload = r.take(numel.checked_mul(4).ok_or("payload size overflows")?)?;
    if r.at != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.at));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> CliResult<()> {
    fs::write(path, encode(t)).map_err(|e| CliError::io(path, e))
}

pub fn read_tensor(path: &Path) -> CliResult<Tensor> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|d| CliError::format(path, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new([2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..8], b"CBEVTNSR");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &0u32.to_le_bytes());
        assert_eq!(&b[16..20], &2u32.to_le_bytes());
        assert_eq!(&b[20..28], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&b[28..32], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 28 + 24);
        assert_eq!(decode(&b).unwrap(), t);
    }

    #[test]
    fn rejects_damage() {
        let t = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let b = encode(&t);
        assert!(decode(&b[..b.len() - 1]).unwrap_err().contains("truncated"));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().contains("magic"));
        let mut bad = b.clone();
        bad[12] = 1;
        assert!(decode(&bad).unwrap_err().contains("dtype"));
        let mut long = b;
        long.push(0);
        assert!(decode(&long).unwrap_err().contains("trailing"));
    }
}
