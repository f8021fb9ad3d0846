//! 8-bit RGB images and binary masks on disk. In memory images are `3×H×W`
//! and masks `H×W`, both with values in `[0,1]`.

use std::path::Path;

use image::{GrayImage, ImageError, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Mask pixels at or above this 8-bit level are shadow.
pub const MASK_THRESHOLD: u8 = 128;

fn image_err(path: &Path, e: ImageError) -> Error {
    match e {
        ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| raw[(i % n) * 3 + i / n] as f64 / 255.0))
}

/// Writes a `3×H×W` image, rounding to 8 bits; the format follows the
/// extension (`.png`, `.ppm`).
pub fn write_rgb(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = img.chw()?;
    if c != 3 {
        return Err(Error::shape("write_rgb", &[3, h, w], img.shape()));
    }
    let n = h * w;
    let d = img.data();
    let buf: Vec<u8> = (0..3 * n).map(|k| to_byte(d[(k % 3) * n + k / 3])).collect();
    RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized")
        .save(path)
        .map_err(|e| image_err(path, e))
}

/// Reads a grayscale (or RGB, luma-converted) mask and thresholds at 128.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[h, w], |p| (raw[p] >= MASK_THRESHOLD) as u8 as f64))
}

/// Writes an `H×W` map in `[0,1]` as 8-bit grayscale (`.pgm` or `.png`).
pub fn write_gray(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = map.hw()?;
    let buf: Vec<u8> = map.data().iter().map(|&v| to_byte(v)).collect();
    GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized")
        .save(path)
        .map_err(|e| image_err(path, e))
}

pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    write_gray(path, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[3, 5, 7], |i| ((i * 53) % 256) as f64 / 255.0);
        for ext in ["png", "ppm"] {
            let p = dir.path().join(format!("x.{ext}"));
            write_rgb(&p, &img).unwrap();
            let back = read_rgb(&p).unwrap();
            assert_eq!(back, img, "{ext}");
        }
    }

    #[test]
    fn mask_thresholds() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let levels = [0u8, 127, 128, 255];
        GrayImage::from_raw(4, 1, levels.to_vec()).unwrap().save(&p).unwrap();
        assert_eq!(read_mask(&p).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        let m = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn missing_and_truncated_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = read_rgb(&dir.path().join("nope.png")).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
        let p = dir.path().join("t.png");
        write_rgb(&p, &Tensor::full(&[3, 16, 16], 0.3)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        let err = read_rgb(&p).unwrap_err();
        assert!(err.is_io(), "{err}");
    }
}
