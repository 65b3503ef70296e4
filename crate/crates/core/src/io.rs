//! On-disk image formats: 8-bit PNG and 16-bit little-endian raw planes.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::condition::RawFrame;
use crate::error::{Error, Result};
use crate::image::ImagePlanes;

/// Writes batch item 0 of a 1- or 3-channel image, rounding ties to even.
pub fn write_png(path: &Path, image: &ImagePlanes) -> Result<()> {
    let [_, c, h, w] = image.shape();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Shape(format!("png needs 1 or 3 channels, got {c}"))),
    };
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push((image.get(0, ch, y, x).clamp(0.0, 1.0) * 255.0).round_ties_even() as u8);
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_png(path: &Path) -> Result<ImagePlanes> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, c) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    let line = info.line_size;
    Ok(ImagePlanes::from_fn([1, c, h, w], |_, ch, y, x| buf[y * line + x * stride + ch] as f64 / 255.0))
}

/// Raw samples scaled to `white` and stored as u16 LE, row-major.
pub fn write_raw16(path: &Path, raw: &RawFrame, white: u16) -> Result<()> {
    let mut bytes = Vec::with_capacity(2 * raw.data().len());
    for v in raw.data() {
        bytes.extend_from_slice(&((v * white as f64).round_ties_even() as u16).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_raw16(path: &Path, height: usize, width: usize, black: u16, white: u16) -> Result<RawFrame> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 2 * height * width {
        return Err(Error::format(path, format!("{} bytes for a {height}x{width} u16 plane", bytes.len())));
    }
    let span = (white - black) as f64;
    let data = bytes
        .chunks_exact(2)
        .map(|b| ((u16::from_le_bytes([b[0], b[1]]).saturating_sub(black)) as f64 / span).min(1.0))
        .collect();
    RawFrame::new(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrips_eight_bit_values() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let img = ImagePlanes::from_fn([1, c, 5, 7], |_, ch, y, x| ((ch * 31 + y * 7 + x * 3) % 256) as f64 / 255.0);
            let path = dir.path().join(format!("a{c}.png"));
            write_png(&path, &img).unwrap();
            assert_eq!(read_png(&path).unwrap(), img);
        }
    }

    #[test]
    fn raw16_roundtrips_fourteen_bit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..24).map(|i| (i * 683) as f64 / 16383.0).collect();
        let raw = RawFrame::new(4, 6, data).unwrap();
        let path = dir.path().join("r.raw16");
        write_raw16(&path, &raw, 16383).unwrap();
        assert_eq!(read_raw16(&path, 4, 6, 0, 16383).unwrap(), raw);
        assert_eq!(read_raw16(&path, 4, 4, 0, 16383).unwrap_err().code(), "E_FORMAT");
    }
}
