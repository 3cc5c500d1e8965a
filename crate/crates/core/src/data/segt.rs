//! `SEGT` tensor container.
//!
//! `magic "SEGT" | u8 version=1 | u8 dtype | u8 rank | u8 reserved=0 |
//! rank x u32 dims | payload`, all little-endian and row-major.
//! dtype: 0 = f32, 1 = f64, 2 = u8, 3 = i32.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

pub const MAGIC: &[u8; 4] = b"SEGT";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum SegtData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl SegtData {
    fn dtype(&self) -> u8 {
        match self {
            SegtData::F32(_) => 0,
            SegtData::F64(_) => 1,
            SegtData::U8(_) => 2,
            SegtData::I32(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            SegtData::F32(v) => v.len(),
            SegtData::F64(v) => v.len(),
            SegtData::U8(v) => v.len(),
            SegtData::I32(v) => v.len(),
        }
    }
}

fn element_size(dtype: u8) -> Option<usize> {
    match dtype {
        0 | 3 => Some(4),
        1 => Some(8),
        2 => Some(1),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegtTensor {
    pub dims: Vec<usize>,
    pub data: SegtData,
}

impl SegtTensor {
    pub fn new(dims: Vec<usize>, data: SegtData) -> Result<Self> {
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if n != Some(data.len()) {
            return Err(Error::shape(format!(
                "dims {dims:?} do not match {} elements",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self.data {
            SegtData::F32(v) => Tensor::new(self.dims, v),
            other => Err(Error::shape(format!("expected f32 payload, got dtype {}", other.dtype()))),
        }
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match (self.data, &self.dims[..]) {
            (SegtData::U8(v), &[h, w]) => LabelMap::new(h, w, v),
            (_, dims) => Err(Error::shape(format!(
                "expected a rank-2 u8 label raster, got dims {dims:?}"
            ))),
        }
    }
}

impl From<&Tensor<f32>> for SegtTensor {
    fn from(t: &Tensor<f32>) -> Self {
        Self {
            dims: t.shape().to_vec(),
            data: SegtData::F32(t.data().to_vec()),
        }
    }
}

impl From<&LabelMap> for SegtTensor {
    fn from(l: &LabelMap) -> Self {
        Self {
            dims: vec![l.height(), l.width()],
            data: SegtData::U8(l.data().to_vec()),
        }
    }
}

pub fn encode(t: &SegtTensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.dims.len()).map_err(|_| Error::shape("rank exceeds 255"))?;
    let mut out = Vec::with_capacity(8 + 4 * t.dims.len() + t.data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, t.data.dtype(), rank, 0]);
    for &d in &t.dims {
        let d = u32::try_from(d).map_err(|_| Error::shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &t.data {
        SegtData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        SegtData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        SegtData::U8(v) => out.extend_from_slice(v),
        SegtData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<SegtTensor> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 8 {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let dtype = bytes[5];
    let size = element_size(dtype).ok_or_else(|| bad(format!("unsupported dtype {dtype}")))?;
    let rank = usize::from(bytes[6]);
    if bytes[7] != 0 {
        return Err(bad("reserved byte must be zero".into()));
    }
    let dims_end = 8 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(bad("truncated dimension list".into()));
    }
    let dims: Vec<usize> = bytes[8..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let numel = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(size))
        .ok_or_else(|| bad(format!("dimensions {dims:?} overflow")))?;
    let payload = &bytes[dims_end..];
    if payload.len() != numel {
        return Err(bad(format!(
            "payload has {} bytes, dims {dims:?} need {numel}",
            payload.len()
        )));
    }
    let data = match dtype {
        0 => SegtData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        1 => SegtData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ),
        2 => SegtData::U8(payload.to_vec()),
        _ => SegtData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
    };
    Ok(SegtTensor { dims, data })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &SegtTensor) -> Result<()> {
    std::fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<SegtTensor> {
    let path = path.as_ref();
    decode(&std::fs::read(path)?, path)
}
