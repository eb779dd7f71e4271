//! Golden-vector files.
//!
//! Little-endian layout: magic `LSRMGV1\0`, `u32` tensor count, then for each
//! tensor `u32` rank, `u32` dims\[rank\] and the `f32` payload. Coordinate
//! sidecars are bare little-endian `u32` triplets.

use std::fs;
use std::path::Path;

use crate::error::{LsrmError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LSRMGV1\0";

pub fn encode(tensors: &[&Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(LsrmError::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(LsrmError::Format {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(LsrmError::Format {
            offset: r.pos as u64,
            msg: "trailing bytes".into(),
        });
    }
    Ok(out)
}

pub fn write(path: &Path, tensors: &[&Tensor]) -> Result<()> {
    fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<Tensor>> {
    decode(&fs::read(path)?)
}

pub fn encode_coords(coords: &[[u32; 3]]) -> Vec<u8> {
    coords
        .iter()
        .flat_map(|c| c.iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

pub fn decode_coords(bytes: &[u8]) -> Result<Vec<[u32; 3]>> {
    if bytes.len() % 12 != 0 {
        return Err(LsrmError::Format {
            offset: (bytes.len() - bytes.len() % 12) as u64,
            msg: "coordinate table is not a whole number of u32 triplets".into(),
        });
    }
    Ok(bytes
        .chunks_exact(12)
        .map(|c| {
            let v = |o: usize| u32::from_le_bytes(c[o..o + 4].try_into().unwrap());
            [v(0), v(4), v(8)]
        })
        .collect())
}

/// Byte-level comparison; reports the first differing offset.
pub fn compare_bytes(expected: &[u8], actual: &[u8]) -> Result<()> {
    if let Some(offset) = expected.iter().zip(actual).position(|(a, b)| a != b) {
        return Err(LsrmError::Format {
            offset: offset as u64,
            msg: format!(
                "golden mismatch: expected 0x{:02x}, found 0x{:02x}",
                expected[offset], actual[offset]
            ),
        });
    }
    if expected.len() != actual.len() {
        return Err(LsrmError::Format {
            offset: expected.len().min(actual.len()) as u64,
            msg: format!(
                "golden length mismatch: expected {} bytes, found {}",
                expected.len(),
                actual.len()
            ),
        });
    }
    Ok(())
}

/// Tolerance comparison of two decoded golden sets; `Err` names the first
/// offending tensor and element.
pub fn compare_tensors(expected: &[Tensor], actual: &[Tensor], tol: f32) -> Result<()> {
    if expected.len() != actual.len() {
        return Err(LsrmError::Format {
            offset: 8,
            msg: format!("expected {} tensors, found {}", expected.len(), actual.len()),
        });
    }
    for (t, (e, a)) in expected.iter().zip(actual).enumerate() {
        if e.shape() != a.shape() {
            return Err(LsrmError::Format {
                offset: 0,
                msg: format!("tensor {t}: shape {:?} vs {:?}", e.shape(), a.shape()),
            });
        }
        if let Some(i) = e
            .data()
            .iter()
            .zip(a.data())
            .position(|(x, y)| (x - y).abs() > tol || x.is_nan() != y.is_nan())
        {
            return Err(LsrmError::Format {
                offset: 0,
                msg: format!(
                    "tensor {t} element {i}: expected {}, found {}",
                    e.data()[i],
                    a.data()[i]
                ),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let b = encode(&[&t]);
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &2u32.to_le_bytes());
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn corrupted_file_reports_offset() {
        let t = SeedStream::new(1).uniform(&[3, 4], 1.0);
        let good = encode(&[&t]);
        let mut bad = good.clone();
        bad[40] ^= 0xff;
        match compare_bytes(&good, &bad) {
            Err(LsrmError::Format { offset, .. }) => assert_eq!(offset, 40),
            other => panic!("expected mismatch, got {other:?}"),
        }
        let mut trunc = good.clone();
        trunc.truncate(30);
        match decode(&trunc) {
            Err(LsrmError::Format { offset, .. }) => assert_eq!(offset, 24),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(
            decode(b"NOTGOLD\0\0\0\0\0"),
            Err(LsrmError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn coords_sidecar() {
        let c = vec![[1, 2, 3], [4_000_000, 0, 7]];
        assert_eq!(decode_coords(&encode_coords(&c)).unwrap(), c);
        assert!(decode_coords(&[0u8; 13]).is_err());
    }
}
