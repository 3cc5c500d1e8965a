//! Binary model checkpoints (`SGCK`).
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `SGCK` |
//! | 2 | version (`1`) |
//! | 1 | architecture tag |
//! | 2 | input channels C |
//! | 2 | classes M |
//! | 4 | parameter count P |
//! | 4·P | parameters as `f32` |
//! | 4 | training iterations (`epochs` field) |
//! | 8 | seed |
//! | 1 | training mode |
//! | 3 | zero padding |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Arch, SegModel};

pub const MAGIC: &[u8; 4] = b"SGCK";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 15;
const META_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum TrainingMode {
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "pgd-at")]
    PgdAt,
    #[serde(rename = "segpgd-at")]
    SegPgdAt,
}

impl TrainingMode {
    pub fn byte(self) -> u8 {
        match self {
            TrainingMode::Standard => 0,
            TrainingMode::PgdAt => 1,
            TrainingMode::SegPgdAt => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(TrainingMode::Standard),
            1 => Some(TrainingMode::PgdAt),
            2 => Some(TrainingMode::SegPgdAt),
            _ => None,
        }
    }

    pub fn is_adversarial(self) -> bool {
        self != TrainingMode::Standard
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingMode::Standard => "standard",
            TrainingMode::PgdAt => "pgd-at",
            TrainingMode::SegPgdAt => "segpgd-at",
        })
    }
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Ok(TrainingMode::Standard),
            "pgd-at" | "pgdat" => Ok(TrainingMode::PgdAt),
            "segpgd-at" | "segpgdat" => Ok(TrainingMode::SegPgdAt),
            other => Err(Error::config(format!("unknown training mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TrainingMeta {
    /// Number of optimizer steps taken.
    pub epochs: u32,
    pub seed: u64,
    pub mode: TrainingMode,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        Self {
            epochs: 0,
            seed: 0,
            mode: TrainingMode::Standard,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: SegModel<f32>,
    pub meta: TrainingMeta,
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let c = u16::try_from(crate::model::Segmenter::in_channels(m))
            .map_err(|_| Error::config("channel count exceeds u16"))?;
        let k = u16::try_from(crate::model::Segmenter::classes(m))
            .map_err(|_| Error::config("class count exceeds u16"))?;
        let flat = m.flat_params();
        let count = u32::try_from(flat.len()).map_err(|_| Error::config("too many parameters"))?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * flat.len() + META_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(m.arch().tag());
        out.extend_from_slice(&c.to_le_bytes());
        out.extend_from_slice(&k.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        for v in flat {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.meta.epochs.to_le_bytes());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.push(self.meta.mode.byte());
        out.extend_from_slice(&[0u8; 3]);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let arch = Arch::from_tag(bytes[6])?;
        let c = usize::from(u16::from_le_bytes([bytes[7], bytes[8]]));
        let k = usize::from(u16::from_le_bytes([bytes[9], bytes[10]]));
        let count = u32::from_le_bytes(bytes[11..15].try_into().expect("4 bytes")) as usize;
        let expected = arch.param_count(c, k);
        if count != expected {
            return Err(bad(format!(
                "parameter count {count} does not match {arch} with C={c}, M={k} ({expected})"
            )));
        }
        let total = HEADER_LEN + 4 * count + META_LEN;
        if bytes.len() != total {
            return Err(bad(format!(
                "expected {total} bytes, found {}",
                bytes.len()
            )));
        }
        let body = &bytes[HEADER_LEN..HEADER_LEN + 4 * count];
        let flat: Vec<f32> = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let meta = &bytes[HEADER_LEN + 4 * count..];
        let epochs = u32::from_le_bytes(meta[..4].try_into().expect("4 bytes"));
        let seed = u64::from_le_bytes(meta[4..12].try_into().expect("8 bytes"));
        let mode = TrainingMode::from_byte(meta[12])
            .ok_or_else(|| bad(format!("unknown training mode byte {}", meta[12])))?;
        Ok(Self {
            model: SegModel::from_flat(arch, c, k, &flat)?,
            meta: TrainingMeta { epochs, seed, mode },
        })
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    ModelCheckpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Segmenter};
    use crate::tensor::Tensor;

    fn ckpt() -> ModelCheckpoint {
        ModelCheckpoint {
            model: build_model(Arch::MiniSegNet, 3, 4, 21).unwrap(),
            meta: TrainingMeta {
                epochs: 300,
                seed: 0xDEAD_BEEF_0123,
                mode: TrainingMode::SegPgdAt,
            },
        }
    }

    #[test]
    fn round_trip_preserves_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sgck");
        let original = ckpt();
        save_checkpoint(&original, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, original);
        let x = Tensor::filled(vec![3, 8, 8], 0.3f32);
        let a = original.model.predict(&x).unwrap();
        let b = back.model.predict(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn header_bytes_are_laid_out_as_documented() {
        let bytes = ckpt().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SGCK");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(&bytes[7..9], &[3, 0]);
        assert_eq!(&bytes[9..11], &[4, 0]);
        assert_eq!(&bytes[11..15], &5220u32.to_le_bytes());
        assert_eq!(bytes.len(), 15 + 4 * 5220 + 16);
        let meta = &bytes[15 + 4 * 5220..];
        assert_eq!(&meta[..4], &300u32.to_le_bytes());
        assert_eq!(&meta[4..12], &0xDEAD_BEEF_0123u64.to_le_bytes());
        assert_eq!(meta[12], 2);
        assert_eq!(&meta[13..], &[0, 0, 0]);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut bytes = ckpt().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn wrong_version_and_param_count_rejected() {
        let good = ckpt().to_bytes().unwrap();
        let mut v = good.clone();
        v[4] = 2;
        assert!(ModelCheckpoint::from_bytes(&v, Path::new("x")).is_err());
        let mut p = good.clone();
        p[11..15].copy_from_slice(&5219u32.to_le_bytes());
        assert!(ModelCheckpoint::from_bytes(&p, Path::new("x")).is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let good = ckpt().to_bytes().unwrap();
        for cut in [3, 14, 100, good.len() - 1] {
            assert!(ModelCheckpoint::from_bytes(&good[..cut], Path::new("x")).is_err());
        }
    }
}
