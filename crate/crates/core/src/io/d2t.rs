use std::path::Path;

use super::{read_file, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"D2T1";

/// Payload class stored after the channel count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum D2tKind {
    /// Values constrained to [0, 1].
    Image = 0,
    /// Unconstrained feature dump.
    Feature = 1,
}

/// Layout: `"D2T1"`, H, W, C as u32 LE, kind byte, then C·H·W f32 LE values
/// in planar order.
pub fn write_d2t(path: impl AsRef<Path>, x: &Tensor<f32>, kind: D2tKind) -> Result<()> {
    write_file(path.as_ref(), &encode(x, kind)?)
}

pub(crate) fn encode(x: &Tensor<f32>, kind: D2tKind) -> Result<Vec<u8>> {
    let s = x.shape();
    if s.n != 1 {
        return Err(Error::shape("write_d2t", format!("{s}: batch must be 1")));
    }
    if kind == D2tKind::Image && x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(
            "image-kind D2T values must lie in [0, 1]".into(),
        ));
    }
    let mut out = Vec::with_capacity(17 + 4 * x.len());
    out.extend_from_slice(MAGIC);
    for v in [s.h, s.w, s.c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(kind as u8);
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_d2t(path: impl AsRef<Path>) -> Result<(Tensor<f32>, D2tKind)> {
    decode(&read_file(path.as_ref())?)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(Tensor<f32>, D2tKind)> {
    let mut r = ByteReader::new(bytes);
    if r.bytes(4, "magic").map_err(|_| Error::BadMagic { expected: "D2T1" })? != MAGIC {
        return Err(Error::BadMagic { expected: "D2T1" });
    }
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let c = r.u32("channels")? as usize;
    let kind = match r.u8("kind")? {
        0 => D2tKind::Image,
        1 => D2tKind::Feature,
        k => return Err(Error::Format(format!("unknown D2T kind byte {k}"))),
    };
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Format(format!("zero extent {h}x{w}x{c}")));
    }
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Format("extent product overflows".into()))?;
    let data = r.f32s(count, "payload")?;
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    if kind == D2tKind::Image && data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Format("image-kind payload outside [0, 1]".into()));
    }
    Ok((Tensor::from_vec(Shape::new(1, c, h, w), data)?, kind))
}
