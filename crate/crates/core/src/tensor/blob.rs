//! Binary tensor blobs (`VLTB`) and named-tensor checkpoint containers (`VLCK`).
//!
//! Blob layout: `"VLTB"`, u8 version (1), u8 dtype (0 = f32, 1 = f64),
//! u8 rank, one zero pad byte, `rank` little-endian u64 dims, then the raw
//! little-endian values. Checkpoints: `"VLCK"`, u32 LE entry count, then per
//! entry a u16 LE name length, the UTF-8 name, and a blob.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{DType, Real, Tensor};

pub const BLOB_MAGIC: &[u8; 4] = b"VLTB";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VLCK";
pub const BLOB_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        found: Vec<u8>,
        expected: &'static [u8],
    },
    #[error("unsupported blob version {0}")]
    Version(u8),
    #[error("unknown dtype code {0}")]
    DType(u8),
    #[error("truncated: needed {needed} bytes at offset {offset}, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid shape {0:?}")]
    Shape(Vec<u64>),
    #[error("{0} trailing bytes after blob")]
    Trailing(usize),
    #[error("checkpoint entry name is not UTF-8")]
    Name,
    #[error("expected dtype {expected:?}, found {found:?}")]
    WrongDType { expected: DType, found: DType },
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: Box<BlobError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl BlobError {
    pub fn in_file(self, path: &Path) -> BlobError {
        BlobError::File {
            path: path.display().to_string(),
            source: Box::new(self),
        }
    }
}

/// A decoded tensor in its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, rounding if the stored precision differs.
    pub fn to<T: Real>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    /// Returns the tensor only if it is stored as `T`.
    pub fn exact<T: Real>(self) -> Result<Tensor<T>, BlobError> {
        if self.dtype() != T::DTYPE {
            return Err(BlobError::WrongDType {
                expected: T::DTYPE,
                found: self.dtype(),
            });
        }
        Ok(self.to())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BlobError> {
        if self.bytes.len() - self.pos < n {
            return Err(BlobError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.bytes.len() - self.pos,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &'static [u8; 4]) -> Result<(), BlobError> {
        let found = self.take(4)?;
        if found != expected {
            return Err(BlobError::BadMagic {
                found: found.to_vec(),
                expected,
            });
        }
        Ok(())
    }
}

pub fn encode_tensor<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    assert!(t.rank() <= u8::MAX as usize);
    out.extend_from_slice(BLOB_MAGIC);
    out.push(BLOB_VERSION);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    out.push(0);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &x in t.data() {
        x.write_le(out);
    }
}

fn decode_from(r: &mut Reader<'_>) -> Result<AnyTensor, BlobError> {
    r.magic(BLOB_MAGIC)?;
    let head = r.take(4)?;
    let (version, code, rank) = (head[0], head[1], head[2] as usize);
    if version != BLOB_VERSION {
        return Err(BlobError::Version(version));
    }
    let dtype = DType::from_code(code).ok_or(BlobError::DType(code))?;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()));
    }
    let mut numel: u64 = 1;
    for &d in &dims {
        numel = match numel.checked_mul(d) {
            Some(n) if d > 0 => n,
            _ => return Err(BlobError::Shape(dims)),
        };
    }
    let bytes_needed = usize::try_from(numel)
        .ok()
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| BlobError::Shape(dims.clone()))?;
    let raw = r.take(bytes_needed)?;
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(
            &shape,
            raw.chunks_exact(4).map(f32::read_le).collect(),
        )),
        DType::F64 => AnyTensor::F64(Tensor::new(
            &shape,
            raw.chunks_exact(8).map(f64::read_le).collect(),
        )),
    })
}

/// Decodes exactly one blob occupying all of `bytes`.
pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor, BlobError> {
    let mut r = Reader { bytes, pos: 0 };
    let t = decode_from(&mut r)?;
    if r.pos != bytes.len() {
        return Err(BlobError::Trailing(bytes.len() - r.pos));
    }
    Ok(t)
}

pub fn encode_checkpoint<T: Real>(entries: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        assert!(nb.len() <= u16::MAX as usize, "entry name too long");
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        encode_tensor(t, &mut out);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, AnyTensor)>, BlobError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(CHECKPOINT_MAGIC)?;
    let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| BlobError::Name)?
            .to_string();
        entries.push((name, decode_from(&mut r)?));
    }
    if r.pos != bytes.len() {
        return Err(BlobError::Trailing(bytes.len() - r.pos));
    }
    Ok(entries)
}

fn read_file(path: &Path) -> Result<Vec<u8>, BlobError> {
    fs::read(path).map_err(|source| BlobError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), BlobError> {
    fs::write(path, bytes).map_err(|source| BlobError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_tensor_file<T: Real>(path: &Path, t: &Tensor<T>) -> Result<(), BlobError> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    write_file(path, &buf)
}

pub fn read_tensor_file(path: &Path) -> Result<AnyTensor, BlobError> {
    decode_tensor(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn write_checkpoint_file<T: Real>(
    path: &Path,
    entries: &[(String, Tensor<T>)],
) -> Result<(), BlobError> {
    write_file(path, &encode_checkpoint(entries))
}

pub fn read_checkpoint_file(path: &Path) -> Result<Vec<(String, AnyTensor)>, BlobError> {
    decode_checkpoint(&read_file(path)?).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        assert_eq!(&buf[..8], b"VLTB\x01\x00\x02\x00");
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(&buf[16..24], &3u64.to_le_bytes());
        assert_eq!(buf.len(), 24 + 6 * 4);
        assert_eq!(&buf[28..32], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let t = Tensor::<f64>::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        for cut in [0, 3, 7, 12, buf.len() - 1] {
            assert!(decode_tensor(&buf[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn corrupt_fields_are_errors() {
        let t = Tensor::<f64>::from_f64(&[1], &[1.0]);
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_tensor(&bad),
            Err(BlobError::BadMagic { .. })
        ));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(decode_tensor(&bad), Err(BlobError::Version(9))));
        let mut bad = buf.clone();
        bad[5] = 7;
        assert!(matches!(decode_tensor(&bad), Err(BlobError::DType(7))));
        let mut bad = buf.clone();
        bad[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_tensor(&bad).is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
            name in "[a-z._0-9]{0,12}",
        ) {
            let n: usize = dims.iter().product();
            let mut s = seed;
            let data: Vec<f32> = (0..n).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((s >> 32) as u32)
            }).collect();
            let t = Tensor::new(&dims, data);
            let bytes = encode_checkpoint(&[(name.clone(), t.clone())]);
            let back = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, &name);
            let AnyTensor::F32(b) = &back[0].1 else { panic!("dtype") };
            prop_assert_eq!(b.shape(), t.shape());
            let same = b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
        }
    }
}
