//! CAMT tensor container.
//!
//! Little-endian layout:
//!
//! | bytes        | content                          |
//! |--------------|----------------------------------|
//! | 4            | magic `CAMT`                     |
//! | 1            | version, `1`                     |
//! | 1            | dtype, `1` = f32, `2` = f64      |
//! | 1            | rank                             |
//! | 8 × rank     | extents, u64 each                |
//! | rest         | row-major payload                |

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"CAMT";
pub const VERSION: u8 = 1;
pub const MAX_RANK: u8 = 8;

#[derive(Debug, Error)]
pub enum CamtError {
    #[error("bad magic {0:?}, expected \"CAMT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unknown dtype code {0}")]
    Dtype(u8),
    #[error("rank {0} out of range 1..={MAX_RANK}")]
    Rank(u8),
    #[error("zero or overflowing extent in shape {0:?}")]
    Extent(Vec<u64>),
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
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
}

pub fn encode(tensor: &Tensor, dtype: Dtype) -> Vec<u8> {
    let header = 7 + 8 * tensor.rank();
    let mut out = Vec::with_capacity(header + dtype.width() * tensor.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(tensor.rank() as u8);
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => tensor
            .data()
            .iter()
            .for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        Dtype::F64 => tensor
            .data()
            .iter()
            .for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

fn need(bytes: &[u8], expected: usize) -> Result<(), CamtError> {
    if bytes.len() < expected {
        return Err(CamtError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<(Tensor, Dtype), CamtError> {
    need(bytes, 7)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if &magic != MAGIC {
        return Err(CamtError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(CamtError::Version(bytes[4]));
    }
    let dtype = match bytes[5] {
        1 => Dtype::F32,
        2 => Dtype::F64,
        other => return Err(CamtError::Dtype(other)),
    };
    let rank = bytes[6];
    if rank == 0 || rank > MAX_RANK {
        return Err(CamtError::Rank(rank));
    }
    let header = 7 + 8 * rank as usize;
    need(bytes, header)?;
    let extents: Vec<u64> = bytes[7..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let count = extents
        .iter()
        .try_fold(1usize, |acc, &e| {
            usize::try_from(e).ok().filter(|&e| e > 0).and_then(|e| acc.checked_mul(e))
        })
        .ok_or_else(|| CamtError::Extent(extents.clone()))?;
    let payload_len = count
        .checked_mul(dtype.width())
        .ok_or_else(|| CamtError::Extent(extents.clone()))?;
    let expected = header + payload_len;
    need(bytes, expected)?;
    if bytes.len() > expected {
        return Err(CamtError::Trailing(bytes.len() - expected));
    }
    let payload = &bytes[header..expected];
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    let shape = extents.iter().map(|&e| e as usize).collect();
    Ok((Tensor::from_parts(shape, data), dtype))
}

pub fn write_tensor_file(path: impl AsRef<Path>, tensor: &Tensor, dtype: Dtype) -> Result<(), CamtError> {
    let path = path.as_ref();
    fs::write(path, encode(tensor, dtype)).map_err(|source| CamtError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor, CamtError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CamtError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngStream;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.camt");
        let t = random(&[3, 4], 5);
        write_tensor_file(&path, &t, Dtype::F64).unwrap();
        let back = read_tensor_file(&path).unwrap();
        assert_eq!(back.shape(), &[3, 4]);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(std::fs::read(&path).unwrap(), encode(&back, Dtype::F64));
    }

    #[test]
    fn f32_payload_reencodes_identically() {
        let t = random(&[2, 5], 9);
        let bytes = encode(&t, Dtype::F32);
        let (back, dtype) = decode(&bytes).unwrap();
        assert_eq!(dtype, Dtype::F32);
        assert_eq!(encode(&back, Dtype::F32), bytes);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&Tensor::zeros(&[2, 2]), Dtype::F64);
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(CamtError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode(&Tensor::zeros(&[2, 2]), Dtype::F64);
        bytes.truncate(bytes.len() - 8); // 3 of 4 values
        assert!(matches!(
            decode(&bytes),
            Err(CamtError::Truncated { expected, found }) if expected == found + 8
        ));
    }

    #[test]
    fn dtype_rank_and_version_errors_are_distinct() {
        let good = encode(&Tensor::zeros(&[2]), Dtype::F64);
        let mut b = good.clone();
        b[5] = 7;
        assert!(matches!(decode(&b), Err(CamtError::Dtype(7))));
        let mut b = good.clone();
        b[6] = 0;
        assert!(matches!(decode(&b), Err(CamtError::Rank(0))));
        let mut b = good.clone();
        b[6] = 9;
        assert!(matches!(decode(&b), Err(CamtError::Rank(9))));
        let mut b = good;
        b[4] = 2;
        assert!(matches!(decode(&b), Err(CamtError::Version(2))));
    }
}
