//! 8-bit PNG input/output. Pixels map to [0, 1] floats by /255 on read and
//! round(v*255) with clamping on write.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decode a PNG into a (1, C, H, W) tensor with C = 1 (grayscale) or 3 (RGB).
/// Alpha channels are dropped; 16-bit files are rejected.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| Error::io(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::io(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::io(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let (channels, stride) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (1, 2),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (3, 4),
        other => return Err(Error::io(path, format!("unsupported color type {other:?}"))),
    };
    let mut out = Tensor::zeros([1, channels, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = &bytes[(y * w + x) * stride..];
            for c in 0..channels {
                *out.at_mut(0, c, y, x) = px[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Encode a (1, C, H, W) tensor with C in {1, 3} as an 8-bit PNG.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let [n, c, h, w] = image.shape();
    if n != 1 || (c != 1 && c != 3) {
        return Err(Error::ShapeMismatch {
            op: "write_png",
            detail: format!("expected (1, 1|3, H, W), got {:?}", image.shape()),
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(if c == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                let v = image.at(0, ci, y, x);
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Collapse an RGB tensor to grayscale luminance; grayscale passes through.
pub fn to_grayscale(image: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = image.shape();
    if n != 1 {
        return Err(Error::ShapeMismatch {
            op: "to_grayscale",
            detail: format!("expected batch of 1, got {n}"),
        });
    }
    match c {
        1 => Ok(image.clone()),
        3 => {
            let mut out = Tensor::zeros([1, 1, h, w]);
            for y in 0..h {
                for x in 0..w {
                    let v = 0.299 * image.at(0, 0, y, x)
                        + 0.587 * image.at(0, 1, y, x)
                        + 0.114 * image.at(0, 2, y, x);
                    *out.at_mut(0, 0, y, x) = v;
                }
            }
            Ok(out)
        }
        other => Err(Error::ShapeMismatch {
            op: "to_grayscale",
            detail: format!("expected 1 or 3 channels, got {other}"),
        }),
    }
}
