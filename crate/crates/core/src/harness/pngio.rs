//! PNG reading and writing for dataset images, model outputs and plots.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Write a 3xHxW tensor of [0,1] values as a 16-bit RGB PNG.
pub fn write_png16(path: &Path, rgb: &Tensor<f64>) -> Result<()> {
    let (c, h, w) = rgb.dims3();
    if c != 3 {
        return Err(Error::dim(format!("write_png16 needs 3 channels, got {c}")));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::parse(format!("png encode: {e}")))?;
    // PNG stores 16-bit samples big-endian
    let mut bytes = Vec::with_capacity(h * w * 6);
    for y in 0..h {
        for x in 0..w {
            for ci in 0..3 {
                let v = (rgb.at3(ci, y, x).clamp(0.0, 1.0) * 65535.0).round() as u16;
                bytes.extend_from_slice(&v.to_be_bytes());
            }
        }
    }
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::parse(format!("png encode: {e}")))?;
    Ok(())
}

/// Write an 8-bit RGB raster (plots).
pub fn write_png8(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), w * h * 3);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::parse(format!("png encode: {e}")))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::parse(format!("png encode: {e}")))?;
    Ok(())
}

/// Read an RGB image (8- or 16-bit, gray or with alpha) into a 3xHxW
/// tensor of [0,1] values.
pub fn read_png(path: &Path) -> Result<Tensor<f64>> {
    let file = File::open(path)?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let sixteen = info.bit_depth == png::BitDepth::Sixteen;
    let denom = if sixteen { 65535.0 } else { 255.0 };
    let sample = |idx: usize| -> f64 {
        if sixteen {
            u16::from_be_bytes([buf[idx * 2], buf[idx * 2 + 1]]) as f64 / denom
        } else {
            buf[idx] as f64 / denom
        }
    };
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * channels;
            for c in 0..3 {
                let v = match channels {
                    1 | 2 => sample(base),
                    _ => sample(base + c),
                };
                out.set3(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// Bit depth of a PNG file, for format assertions.
pub fn png_bit_depth(path: &Path) -> Result<u8> {
    let file = File::open(path)?;
    let decoder = png::Decoder::new(file);
    let reader = decoder
        .read_info()
        .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
    Ok(reader.info().bit_depth as u8)
}
