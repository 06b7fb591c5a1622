use std::path::Path;

use ccdnet_autograd::{Scalar, Tensor};
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct IrImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl IrImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Image(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, 1, self.height, self.width], |i| {
            T::from_f32(self.data[i]).unwrap()
        })
    }
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image(format!("{}: {e}", path.display()))
}

/// Reads a grayscale PNG (8 or 16 bit) as `[0, 1]` floats. Colour images
/// are converted to luma.
pub fn read_png(path: &Path) -> Result<IrImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
        other => {
            log::warn!("{}: not grayscale, converting to luma", path.display());
            other
                .to_luma16()
                .into_raw()
                .into_iter()
                .map(|v| v as f32 / 65535.0)
                .collect()
        }
    };
    IrImage::new(w, h, data)
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

pub fn write_png16(path: &Path, img: &IrImage) -> Result<()> {
    let raw: Vec<u16> = img
        .data
        .iter()
        .map(|&v| quantize(v, 65535.0) as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, raw)
            .ok_or_else(|| image_err(path, "buffer size"))?;
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn write_png8(path: &Path, img: &IrImage) -> Result<()> {
    let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v, 255.0) as u8).collect();
    let buf = GrayImage::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| image_err(path, "buffer size"))?;
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: Vec<u8>) -> Result<()> {
    let buf = RgbImage::from_raw(width as u32, height as u32, rgb)
        .ok_or_else(|| image_err(path, "buffer size"))?;
    buf.save(path).map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = IrImage::new(5, 3, (0..15).map(|i| i as f32 / 14.0).collect()).unwrap();
        let p16 = dir.path().join("a.png");
        write_png16(&p16, &img).unwrap();
        let back = read_png(&p16).unwrap();
        assert_eq!((back.width, back.height), (5, 3));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-4);
        }
        let p8 = dir.path().join("b.png");
        write_png8(&p8, &img).unwrap();
        let back = read_png(&p8).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
