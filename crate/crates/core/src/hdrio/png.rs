use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use super::LdrImage;
use crate::error::{Error, Result};

/// `round(255 v)` with halves rounded up.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

pub fn encode_png8(img: &LdrImage) -> Result<Vec<u8>> {
    let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .ok_or_else(|| Error::Codec("buffer size does not match dimensions".into()))?;
    let mut out = Vec::new();
    buf.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(out)
}

pub fn decode_png8(bytes: &[u8]) -> Result<LdrImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Codec(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    LdrImage::new(
        w as usize,
        h as usize,
        img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
    )
}

pub fn write_png8(img: &LdrImage, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_png8(img)?)?;
    Ok(())
}

pub fn read_png8(path: impl AsRef<Path>) -> Result<LdrImage> {
    decode_png8(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_points() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.5 - 1e-9), 127);
    }
}
