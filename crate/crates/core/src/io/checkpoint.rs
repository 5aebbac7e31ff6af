use std::path::Path;

use super::{read_file, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"D2CK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named single-precision array of arbitrary rank.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered bundle of uniquely named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate checkpoint entry {name:?}")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "checkpoint",
                format!("{name}: dims {dims:?} vs {} values", data.len()),
            ));
        }
        self.entries.push(NamedTensor { name, dims, data });
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: &Tensor<f32>) -> Result<()> {
        self.insert(name, t.shape().dims().to_vec(), t.data().to_vec())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no entry {name:?}")))?;
        let [n, c, h, w] = <[usize; 4]>::try_from(e.dims.as_slice())
            .map_err(|_| Error::Format(format!("{name}: rank {} is not 4", e.dims.len())))?;
        Tensor::from_vec(Shape::new(n, c, h, w), e.data.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic { expected: "D2CK" });
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated(format!("{} byte checkpoint", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let mut r = ByteReader::new(&body[4..]);
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Unsupported(format!("checkpoint version {version}")));
        }
        let count = r.u32("entry count")?;
        let mut ck = Checkpoint::new();
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.bytes(len, "entry name")?)
                .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            // Each extent takes four bytes, so a bogus rank fails here cheaply.
            if rank.saturating_mul(4) > r.remaining() {
                return Err(Error::Truncated(format!("{name}: rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("extent")? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{name}: extent product overflows")))?;
            let data = r.f32s(numel, &name)?;
            ck.insert(name, dims, data).map_err(|e| Error::Format(e.to_string()))?;
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} unexpected bytes before checksum", r.remaining())));
        }
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::CrcMismatch { stored, computed });
        }
        Ok(ck)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    write_file(path.as_ref(), &ck.to_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path.as_ref())?)
}
