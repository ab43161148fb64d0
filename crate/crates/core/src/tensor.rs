//! Dense row-major tensors, seeded random generation and the SNKT dump format.
//!
//! SNKT layout (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic  b"SNKT"
//! 4       4           u32 version (= 1)
//! 8       4           u32 dtype code (1 = f32)
//! 12      4           u32 ndim
//! 16      8 * ndim    u64 extents
//! ..      4 * numel   f32 payload, row-major
//! ```
//!
//! There is no padding, checksum or trailer.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::rng::TensorRng;
use crate::scalar::Scalar;

pub const SNKT_MAGIC: [u8; 4] = *b"SNKT";
pub const SNKT_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: dims {dims:?} hold {expected} elements, got {actual}")]
    ShapeMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid dims {0:?}: every extent must be positive")]
    InvalidDims(Vec<usize>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"SNKT\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0} (expected 1)")]
    BadVersion(u32),
    #[error("unsupported dtype code {0} (expected 1 = f32)")]
    BadDtype(u32),
    #[error("short header: missing {field}")]
    ShortHeader { field: &'static str },
    #[error("short payload: expected {expected} bytes, found {found}")]
    ShortPayload { expected: usize, found: usize },
    #[error("trailing bytes: {0} bytes after payload")]
    TrailingBytes(usize),
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<TensorError>,
    },
}

/// Distribution used by [`random_tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dist {
    /// Uniform on `[0, 1)` with 24-bit resolution.
    Uniform01,
    /// Standard normal via Box–Muller.
    StandardNormal,
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected = numel(&dims)?;
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self, TensorError> {
        let n = numel(&dims)?;
        Ok(Self {
            dims,
            data: vec![T::zero(); n],
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing dimension.
    pub fn row_len(&self) -> usize {
        *self.dims.last().expect("tensor has at least one dim")
    }

    /// Number of rows when viewed as `[numel / row_len, row_len]`.
    pub fn num_rows(&self) -> usize {
        self.data.len() / self.row_len()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.row_len())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn numel(dims: &[usize]) -> Result<usize, TensorError> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(TensorError::InvalidDims(dims.to_vec()));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::InvalidDims(dims.to_vec()))
}

/// Deterministic tensor from `(dims, seed, dist)`.
pub fn random_tensor<T: Scalar>(
    dims: Vec<usize>,
    seed: u64,
    dist: Dist,
) -> Result<Tensor<T>, TensorError> {
    let n = numel(&dims)?;
    let mut rng = TensorRng::new(seed);
    let data = (0..n)
        .map(|_| match dist {
            Dist::Uniform01 => T::of(rng.uniform01()),
            Dist::StandardNormal => T::of(rng.standard_normal()),
        })
        .collect();
    Ok(Tensor { dims, data })
}

/// Encodes a tensor as SNKT bytes.
pub fn encode_snkt(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(&SNKT_MAGIC);
    out.extend_from_slice(&SNKT_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in &t.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], TensorError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(TensorError::ShortHeader { field }),
        }
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// Decodes SNKT bytes.
pub fn decode_snkt(buf: &[u8]) -> Result<Tensor<f32>, TensorError> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != SNKT_MAGIC {
        return Err(TensorError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != SNKT_VERSION {
        return Err(TensorError::BadVersion(version));
    }
    let dtype = r.u32("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(TensorError::BadDtype(dtype));
    }
    let ndim = r.u32("ndim")? as usize;
    let mut dims = Vec::with_capacity(ndim.min(16));
    for _ in 0..ndim {
        let d = r.u64("dims")?;
        dims.push(usize::try_from(d).map_err(|_| TensorError::InvalidDims(vec![usize::MAX]))?);
    }
    let n = numel(&dims)?;
    let expected = n
        .checked_mul(4)
        .ok_or_else(|| TensorError::InvalidDims(dims.clone()))?;
    let rest = &buf[r.pos..];
    if rest.len() < expected {
        return Err(TensorError::ShortPayload {
            expected,
            found: rest.len(),
        });
    }
    if rest.len() > expected {
        return Err(TensorError::TrailingBytes(rest.len() - expected));
    }
    let data = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor { dims, data })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<(), TensorError> {
    let path = path.as_ref();
    let io = |source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode_snkt(t)).map_err(io)?;
    f.flush().map_err(io)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>, TensorError> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_snkt(&buf).map_err(|e| TensorError::Parse {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_file_length_follows_layout() {
        let t = Tensor::new(vec![1], vec![0.0f32]).unwrap();
        let bytes = encode_snkt(&t);
        // magic + version + dtype + ndim + one u64 extent + one f32
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 8 + 4);
        assert_eq!(&bytes[..4], b"SNKT");
        assert_eq!(decode_snkt(&bytes).unwrap(), t);
    }

    #[test]
    fn header_fields_are_little_endian() {
        let t = Tensor::new(vec![2, 3], vec![1.5f32; 6]).unwrap();
        let b = encode_snkt(&t);
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
        assert_eq!(&b[12..16], &[2, 0, 0, 0]);
        assert_eq!(&b[16..24], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[24..32], &[3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[32..36], &1.5f32.to_le_bytes());
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.snkt");
        let t = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back.dims(), &[2, 2]);
        assert_eq!(
            back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn ten_megabyte_round_trip_is_byte_exact() {
        let t: Tensor<f32> = random_tensor(vec![640, 4096], 7, Dist::StandardNormal).unwrap();
        let bytes = encode_snkt(&t);
        assert!(bytes.len() > 10 * 1024 * 1024);
        let back = decode_snkt(&bytes).unwrap();
        assert_eq!(encode_snkt(&back), bytes);
    }

    #[test]
    fn corrupted_magic_is_reported() {
        let t = Tensor::new(vec![1], vec![0.0f32]).unwrap();
        let mut b = encode_snkt(&t);
        b[0] = b'X';
        let err = decode_snkt(&b).unwrap_err();
        assert!(matches!(err, TensorError::BadMagic(_)));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn bad_version_and_dtype_are_distinct() {
        let t = Tensor::new(vec![1], vec![0.0f32]).unwrap();
        let mut b = encode_snkt(&t);
        b[4] = 2;
        assert!(matches!(decode_snkt(&b), Err(TensorError::BadVersion(2))));
        let mut b = encode_snkt(&t);
        b[8] = 9;
        assert!(matches!(decode_snkt(&b), Err(TensorError::BadDtype(9))));
    }

    #[test]
    fn truncation_is_reported() {
        let t = Tensor::new(vec![4], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = encode_snkt(&t);
        let err = decode_snkt(&b[..b.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("short payload"), "{err}");
        let err = decode_snkt(&b[..18]).unwrap_err();
        assert!(matches!(err, TensorError::ShortHeader { field: "dims" }));
    }

    #[test]
    fn read_error_carries_path() {
        let err = read_tensor("/nonexistent/dir/t.snkt").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/t.snkt"));
    }

    #[test]
    fn random_tensor_is_deterministic_and_seeded() {
        let a: Tensor<f32> = random_tensor(vec![8, 8], 42, Dist::StandardNormal).unwrap();
        let b: Tensor<f32> = random_tensor(vec![8, 8], 42, Dist::StandardNormal).unwrap();
        let c: Tensor<f32> = random_tensor(vec![8, 8], 43, Dist::StandardNormal).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_stays_in_unit_interval() {
        let t: Tensor<f32> = random_tensor(vec![100_000], 1, Dist::Uniform01).unwrap();
        assert!(t.data().iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn shape_is_validated() {
        assert!(Tensor::new(vec![2, 2], vec![0.0f32; 3]).is_err());
        assert!(Tensor::<f32>::zeros(vec![2, 0]).is_err());
        assert!(Tensor::<f32>::zeros(vec![]).is_err());
    }
}
