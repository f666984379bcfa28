//! Binary tensor file format.
//!
//! Layout, all little-endian:
//!   magic "VTEN" | version u32 | rank u32 | dims u64[rank] | dtype u32 |
//!   payload (row-major f32)
//!
//! dtype 1 is f32 and is the only code defined.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const TENSOR_MAGIC: [u8; 4] = *b"VTEN";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dims overflow: {0:?}")]
    DimsOverflow(Vec<u64>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An owned f32 tensor with explicit dims.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "dims do not match payload");
        Self { dims, data }
    }

    pub fn from_mat(mat: &tilesparse::Mat<f32>) -> Self {
        Self::new(vec![mat.rows(), mat.cols()], mat.data().to_vec())
    }

    /// Rank-2 tensors convert back to a matrix.
    pub fn to_mat(&self) -> Option<tilesparse::Mat<f32>> {
        match self.dims.as_slice() {
            [rows, cols] => Some(tilesparse::Mat::from_vec(*rows, *cols, self.data.clone())),
            _ => None,
        }
    }
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_tensor(path: impl AsRef<Path>, tensor: &TensorData) -> Result<(), TensorFileError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&TENSOR_MAGIC)?;
        w.write_all(&TENSOR_VERSION.to_le_bytes())?;
        w.write_all(&(tensor.dims.len() as u32).to_le_bytes())?;
        for &d in &tensor.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&DTYPE_F32.to_le_bytes())?;
        for &v in &tensor.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorData, TensorFileError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != TENSOR_MAGIC {
        return Err(TensorFileError::BadMagic { found: magic, expected: TENSOR_MAGIC });
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != TENSOR_VERSION {
        return Err(TensorFileError::UnsupportedVersion(version));
    }
    r.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    let mut dims64 = Vec::with_capacity(rank);
    let mut qword = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut qword)?;
        dims64.push(u64::from_le_bytes(qword));
    }
    let mut count = 1usize;
    for &d in &dims64 {
        count = usize::try_from(d)
            .ok()
            .and_then(|d| count.checked_mul(d))
            .ok_or_else(|| TensorFileError::DimsOverflow(dims64.clone()))?;
    }
    r.read_exact(&mut word)?;
    let dtype = u32::from_le_bytes(word);
    if dtype != DTYPE_F32 {
        return Err(TensorFileError::UnsupportedDtype(dtype));
    }
    let expected = count * 4;
    let mut payload = Vec::with_capacity(expected);
    r.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(TensorFileError::Truncated { expected, found: payload.len() });
    }
    let data =
        payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(TensorData { dims: dims64.into_iter().map(|d| d as usize).collect(), data })
}
