//! Dense row-major containers and the `PQKV` binary tensor format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PQKV" | version: u32 | dtype: u8 | ndim: u8 | dims: ndim x u64 | payload
//! ```
//!
//! dtype 0 is f32, dtype 1 is u16 (used for PQ code grids).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PQKV";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U16 = 1,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::U16),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl TensorF32 {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "dims {dims:?} describe {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Leading extent; 0 for a scalar.
    pub fn rows(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    /// Product of all trailing extents.
    pub fn row_len(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, DType::F32, &self.dims)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let dims = read_header(r, DType::F32)?;
        let n = element_count(&dims)?;
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dims, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

pub fn write_u16_grid<W: Write>(w: &mut W, dims: &[usize], data: &[u16]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(Error::DimensionMismatch(format!(
            "dims {dims:?} describe {expected} elements, got {}",
            data.len()
        )));
    }
    write_header(w, DType::U16, dims)?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_u16_grid<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<u16>)> {
    let dims = read_header(r, DType::U16)?;
    let n = element_count(&dims)?;
    let mut buf = vec![0u8; n * 2];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok((dims, data))
}

fn write_header<W: Write>(w: &mut W, dtype: DType, dims: &[usize]) -> Result<()> {
    let ndim = u8::try_from(dims.len())
        .map_err(|_| Error::Format(format!("{} dimensions do not fit in u8", dims.len())))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[dtype as u8, ndim])?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R, want: DType) -> Result<Vec<usize>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut pair = [0u8; 2];
    r.read_exact(&mut pair)?;
    let dtype = DType::from_code(pair[0])?;
    if dtype != want {
        return Err(Error::Format(format!(
            "expected dtype {want:?}, found {dtype:?}"
        )));
    }
    let mut dims = Vec::with_capacity(pair[1] as usize);
    for _ in 0..pair[1] {
        let mut d = [0u8; 8];
        r.read_exact(&mut d)?;
        let d = usize::try_from(u64::from_le_bytes(d))
            .map_err(|_| Error::Format("dimension does not fit in usize".into()))?;
        dims.push(d);
    }
    Ok(dims)
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(TensorF32::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(TensorF32::new(vec![2], vec![1.0, f32::NAN]).is_err());
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let t = TensorF32::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let mut expected = b"PQKV".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&[0, 2]);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let mut buf = Vec::new();
        write_u16_grid(&mut buf, &[2], &[1, 2]).unwrap();
        let err = TensorF32::read_from(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let t = TensorF32::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(TensorF32::read_from(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn f32_roundtrip(rows in 0usize..6, cols in 1usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 1e6)
                .collect();
            let t = TensorF32::matrix(rows, cols, data).unwrap();
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            prop_assert_eq!(TensorF32::read_from(&mut buf.as_slice()).unwrap(), t);
        }

        #[test]
        fn u16_roundtrip(data in proptest::collection::vec(any::<u16>(), 0..40)) {
            let dims = vec![data.len()];
            let mut buf = Vec::new();
            write_u16_grid(&mut buf, &dims, &data).unwrap();
            let (d, v) = read_u16_grid(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(d, dims);
            prop_assert_eq!(v, data);
        }
    }
}
