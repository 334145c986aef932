//! CSTT binary tensor records.
//!
//! Layout: magic `CSTT`, version byte (1), dtype byte (1 = f32, 2 = f64),
//! rank byte, `rank` little-endian u64 extents, then row-major little-endian
//! scalars.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{DType, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CSTT";
pub const VERSION: u8 = 1;

/// Size in bytes of the encoded record for `t`.
pub fn encoded_len(t: &Tensor) -> usize {
    7 + 8 * t.rank() + t.numel() * t.dtype().size_of()
}

pub fn encode(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.dtype().code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> io::Result<()> {
    let mut buf = Vec::with_capacity(encoded_len(t));
    encode(t, &mut buf);
    w.write_all(&buf)
}

/// Decodes one record from the front of `bytes`, returning it with the
/// number of bytes consumed. Errors are plain messages; callers attach the
/// file path.
pub fn decode(bytes: &[u8]) -> std::result::Result<(Tensor, usize), String> {
    let take = |from: usize, len: usize| {
        bytes
            .get(from..from + len)
            .ok_or_else(|| format!("truncated record: need {} bytes, have {}", from + len, bytes.len()))
    };
    if take(0, 4)? != MAGIC {
        return Err("bad magic, expected CSTT".into());
    }
    let head = take(4, 3)?;
    if head[0] != VERSION {
        return Err(format!("unsupported version {}", head[0]));
    }
    let dtype = DType::from_code(head[1]).ok_or_else(|| format!("unknown dtype code {}", head[1]))?;
    let rank = head[2] as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let b = take(7 + 8 * i, 8)?;
        shape.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
    }
    let off = 7 + 8 * rank;
    let n: usize = shape.iter().product();
    let size = dtype.size_of();
    let raw = take(off, n * size)?;
    let data: Vec<f64> = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let t = Tensor::from_vec(data, &shape, dtype).map_err(|e| e.to_string())?;
    Ok((t, off + n * size))
}

pub fn read_tensor<R: Read>(r: &mut R) -> io::Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
        .map(|(t, _)| t)
        .map_err(|m| io::Error::new(io::ErrorKind::InvalidData, m))
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(encoded_len(t));
    encode(t, &mut buf);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })?;
    if used != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_vec(vec![1.0, 2.0], &[2, 1], DType::F32).unwrap();
        let mut buf = Vec::new();
        encode(&t, &mut buf);
        assert_eq!(&buf[..4], b"CSTT");
        assert_eq!(&buf[4..7], &[1, 1, 2]);
        assert_eq!(&buf[7..15], &2u64.to_le_bytes());
        assert_eq!(&buf[15..23], &1u64.to_le_bytes());
        assert_eq!(&buf[23..27], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), encoded_len(&t));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let t = Tensor::f64(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let mut buf = Vec::new();
        encode(&t, &mut buf);
        assert!(decode(&buf[..buf.len() - 1]).unwrap_err().contains("truncated"));
        buf[0] = b'X';
        assert!(decode(&buf).unwrap_err().contains("magic"));
    }

    proptest! {
        #[test]
        fn roundtrip(vals in proptest::collection::vec(-1e6f64..1e6, 1..40), f32_tag in any::<bool>()) {
            let dtype = if f32_tag { DType::F32 } else { DType::F64 };
            let t = Tensor::from_vec(vals.clone(), &[vals.len()], dtype).unwrap();
            let mut buf = Vec::new();
            encode(&t, &mut buf);
            let (back, used) = decode(&buf).unwrap();
            prop_assert_eq!(used, buf.len());
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.dtype(), dtype);
            prop_assert_eq!(back.data(), t.data());
        }
    }
}
