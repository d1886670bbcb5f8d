//! Image file I/O: PFM (32-bit float, linear, bit-exact round-trip) and
//! 8-bit sRGB PNG for previews.

use crate::geom::ImageBuffer;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("image io: {0}")]
    Io(#[from] std::io::Error),
    #[error("pfm: {0}")]
    Pfm(String),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error("{0}-channel buffer not supported here (need {1})")]
    Channels(u8, &'static str),
}

/// Write a 1- or 3-channel buffer as PFM (little-endian, rows bottom-to-top).
pub fn write_pfm(img: &ImageBuffer, path: &Path) -> Result<(), ImageIoError> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        other => return Err(ImageIoError::Channels(other, "1 or 3")),
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "{tag}\n{} {}\n-1.0\n", img.width, img.height)?;
    let ch = img.channels as usize;
    let row_len = img.width as usize * ch;
    for y in (0..img.height as usize).rev() {
        let row = &img.data[y * row_len..(y + 1) * row_len];
        for v in row {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<ImageBuffer, ImageIoError> {
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = String::new();
    for _ in 0..3 {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(ImageIoError::Pfm("truncated header".into()));
        }
        header.push_str(&line);
    }
    let mut fields = header.split_whitespace();
    let tag = fields.next().unwrap_or("");
    let channels: u8 = match tag {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(ImageIoError::Pfm(format!("bad magic '{other}'"))),
    };
    let parse = |s: Option<&str>, what: &str| -> Result<f64, ImageIoError> {
        s.and_then(|t| t.parse().ok())
            .ok_or_else(|| ImageIoError::Pfm(format!("bad {what}")))
    };
    let width = parse(fields.next(), "width")? as u32;
    let height = parse(fields.next(), "height")? as u32;
    let scale = parse(fields.next(), "scale")?;
    if width == 0 || height == 0 {
        return Err(ImageIoError::Pfm("zero dimension".into()));
    }
    let little_endian = scale < 0.0;
    let ch = channels as usize;
    let row_len = width as usize * ch;
    let mut bytes = vec![0u8; row_len * height as usize * 4];
    reader.read_exact(&mut bytes).map_err(|_| ImageIoError::Pfm("truncated data".into()))?;
    let mut data = vec![0.0f64; row_len * height as usize];
    for y in 0..height as usize {
        let src_row = height as usize - 1 - y; // stored bottom-to-top
        for i in 0..row_len {
            let off = (src_row * row_len + i) * 4;
            let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            if !v.is_finite() {
                return Err(ImageIoError::Pfm(format!("non-finite value at {y},{i}")));
            }
            data[y * row_len + i] = v as f64;
        }
    }
    ImageBuffer::from_data(width, height, channels, data)
        .map_err(|e| ImageIoError::Pfm(e.to_string()))
}

/// Standard sRGB transfer function on a linear value in [0,1].
pub fn srgb_encode(linear: f64) -> f64 {
    let c = linear.clamp(0.0, 1.0);
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// Write a 3-channel linear buffer as 8-bit sRGB PNG.
pub fn write_png_srgb(img: &ImageBuffer, path: &Path) -> Result<(), ImageIoError> {
    if img.channels != 3 {
        return Err(ImageIoError::Channels(img.channels, "3"));
    }
    let mut pixels = Vec::with_capacity(img.data.len());
    for v in &img.data {
        pixels.push((srgb_encode(*v) * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let rgb = image::RgbImage::from_raw(img.width, img.height, pixels)
        .expect("sized from the buffer");
    rgb.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_roundtrip_is_bit_exact_in_f32() {
        let data: Vec<f64> = (0..2 * 3 * 3)
            .map(|i| (i as f32 * 0.317 - 1.5) as f64) // representable in f32
            .collect();
        let img = ImageBuffer::from_data(3, 2, 3, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pfm");
        write_pfm(&img, &path).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
        }
    }

    #[test]
    fn pfm_single_channel() {
        let img = ImageBuffer::from_data(2, 2, 1, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cov.pfm");
        write_pfm(&img, &path).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.channels, 1);
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn pfm_truncated_is_error() {
        let img = ImageBuffer::from_data(4, 4, 3, vec![0.5; 48]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pfm");
        write_pfm(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(read_pfm(&path), Err(ImageIoError::Pfm(_))));
    }

    #[test]
    fn srgb_endpoints() {
        assert_eq!(srgb_encode(0.0), 0.0);
        assert!((srgb_encode(1.0) - 1.0).abs() < 1e-12);
        // linear segment
        assert!((srgb_encode(0.002) - 12.92 * 0.002).abs() < 1e-12);
    }

    #[test]
    fn png_write_smoke() {
        let mut img = ImageBuffer::new(8, 8, 3);
        for y in 0..8 {
            for x in 0..8 {
                img.set(x, y, 0, x as f64 / 7.0);
                img.set(x, y, 1, y as f64 / 7.0);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        write_png_srgb(&img, &path).unwrap();
        let meta = std::fs::metadata(&path).unwrap();
        assert!(meta.len() > 0);
    }
}
