//! Flat little-endian parameter checkpoints.
//!
//! Layout: magic `TJCK`, `u32` version, then until end of file one record
//! per tensor: `u32` name length, UTF-8 name, `u32` rank, `u64` per
//! dimension, then the `f64` data.

use std::io::{self, Read, Write};

use super::{NumericsError, Tensor};

pub const MAGIC: &[u8; 4] = b"TJCK";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, records: &[(String, Tensor)]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, NumericsError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(4)? != MAGIC {
        return Err(NumericsError::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(NumericsError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| NumericsError::Checkpoint(format!("record {}: name is not UTF-8", records.len())))?
            .to_owned();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumericsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(NumericsError::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, NumericsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NumericsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_stable() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w".into(), Tensor::scalar(1.5))]).unwrap();
        assert_eq!(&buf[..4], b"TJCK");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..13], b"w");
        assert_eq!(&buf[13..17], &0u32.to_le_bytes());
        assert_eq!(&buf[17..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn round_trip_preserves_names_and_values() {
        let records = vec![
            (
                "enc.w1".to_string(),
                Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap(),
            ),
            ("bias".to_string(), Tensor::vector(vec![0.1, 0.2])),
            ("alpha".to_string(), Tensor::scalar(1.0)),
        ];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &records).unwrap();
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), records);
    }

    #[test]
    fn truncation_and_bad_magic_are_errors() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w".into(), Tensor::vector(vec![1.0, 2.0]))]).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
