use std::io::Cursor;
use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Reads an 8-bit grayscale or RGB PNG as a 1×C×H×W tensor scaled by 1/255.
pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Unsupported(m) => Error::Unsupported(format!("{}: {m}", path.display())),
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Unsupported(format!(
            "{:?}-bit png; only 8-bit is accepted",
            info.bit_depth
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Unsupported(format!(
                "png color type {other:?}; only grayscale and RGB are accepted"
            )))
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png: image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let stride = frame.line_size;
    let shape = Shape::new(1, channels, h, w);
    Ok(Tensor::from_fn(shape, |_, c, y, x| {
        buf[y * stride + x * channels + c] as f32 / 255.0
    }))
}

/// Byte encoding of a [0,1] value: `round(clamp(v, 0, 1) * 255)`, halves up.
pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1×1×H×W or 1×3×H×W tensor as an 8-bit PNG.
pub fn write_png(path: impl AsRef<Path>, x: &Tensor<f32>) -> Result<()> {
    let s = x.shape();
    let color = match (s.n, s.c) {
        (1, 1) => png::ColorType::Grayscale,
        (1, 3) => png::ColorType::Rgb,
        _ => {
            return Err(Error::shape(
                "write_png",
                format!("{s}: expected a single 1- or 3-channel image"),
            ))
        }
    };
    let mut pixels = Vec::with_capacity(s.numel());
    for y in 0..s.h {
        for xx in 0..s.w {
            for c in 0..s.c {
                pixels.push(quantize(x.at(0, c, y, xx)));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, s.w as u32, s.h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png encode: {e}")))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    }
    write_file(path.as_ref(), &out)
}
