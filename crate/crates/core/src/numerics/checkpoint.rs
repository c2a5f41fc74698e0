//! Named-array checkpoint files.
//!
//! Layout (little-endian): magic `PGCK`, version `u16`, array count `u32`,
//! then per array: name length `u16`, UTF-8 name, rank `u8`, each dim as
//! `u32`, and the row-major `f32` data. The training configuration travels
//! as an extra rank-1 array named [`CONFIG_ARRAY`] holding one UTF-8 byte per
//! element.

use std::path::Path;

use super::{ParamStore, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"PGCK";
const VERSION: u16 = 1;
pub const CONFIG_ARRAY: &str = "__config__";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("array name at byte {0} is not UTF-8")]
    BadName(usize),
    #[error("config blob is not valid UTF-8 bytes")]
    BadConfig,
    #[error("checkpoint has no array named {0}")]
    MissingArray(String),
    #[error("array {name}: stored shape {stored:?} does not match {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("name too long or too many dimensions for array {0}")]
    Unencodable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
    pub config: Option<String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated(self.pos))?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, config: Option<String>) -> Self {
        let arrays = store
            .iter()
            .map(|(_, p)| NamedArray {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.to_f32_vec(),
            })
            .collect();
        Self { arrays, config }
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Overwrite every parameter of `store` with the array of the same name.
    pub fn restore_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let arr = self.get(&name).ok_or_else(|| CheckpointError::MissingArray(name.clone()))?;
            let expected = store.value(id).shape().to_vec();
            if arr.shape != expected {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    stored: arr.shape.clone(),
                    expected,
                });
            }
            let t = Tensor::from_f32(&arr.shape, &arr.data).expect("shape checked");
            store.set_value(id, t).expect("shape checked");
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = self.arrays.len() + usize::from(self.config.is_some());
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let config_array = self.config.as_ref().map(|c| NamedArray {
            name: CONFIG_ARRAY.to_string(),
            shape: vec![c.len()],
            data: c.bytes().map(f32::from).collect(),
        });
        for arr in self.arrays.iter().chain(config_array.as_ref()) {
            let name = arr.name.as_bytes();
            if name.len() > u16::MAX as usize || arr.shape.len() > u8::MAX as usize {
                return Err(CheckpointError::Unencodable(arr.name.clone()));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(arr.shape.len() as u8);
            for &d in &arr.shape {
                let d = u32::try_from(d).map_err(|_| CheckpointError::Unencodable(arr.name.clone()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &arr.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint::default();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::BadName(name_at))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if name == CONFIG_ARRAY {
                let bytes: Vec<u8> = data
                    .iter()
                    .map(|&v| if (0.0..=255.0).contains(&v) && v.fract() == 0.0 { Ok(v as u8) } else { Err(CheckpointError::BadConfig) })
                    .collect::<Result<_, _>>()?;
                ckpt.config = Some(String::from_utf8(bytes).map_err(|_| CheckpointError::BadConfig)?);
            } else {
                ckpt.arrays.push(NamedArray { name, shape, data });
            }
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
