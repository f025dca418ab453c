//! 8-bit RGB image files and their [0,1] float tensor view.

use std::path::Path;

use image::{ColorType, DynamicImage};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: u32,
    pub height: u32,
    /// `height * width * 3` bytes, row-major, RGB interleaved.
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} rgb bytes", width as usize * height as usize * 3),
                got: format!("{}", data.len()),
            });
        }
        Ok(ImageBuffer {
            width,
            height,
            data,
        })
    }

    /// Float view: value = byte / 255, shape (1, 3, h, w).
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w) = (self.height as usize, self.width as usize);
        let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    *t.at_mut(0, c, y, x) = self.data[(y * w + x) * 3 + c] as f32 / 255.0;
                }
            }
        }
        t
    }

    /// Quantization back to bytes: round(clamp(v, 0, 1) * 255).
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let Shape { n, c, h, w } = t.shape;
        if n != 1 || c != 3 {
            return Err(Error::ShapeMismatch {
                expected: "1x3xHxW".into(),
                got: t.shape.to_string(),
            });
        }
        let mut data = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for ci in 0..3 {
                    let v = t.at(0, ci, y, x).clamp(0.0, 1.0);
                    data[(y * w + x) * 3 + ci] = (v * 255.0).round() as u8;
                }
            }
        }
        Ok(ImageBuffer {
            width: w as u32,
            height: h as u32,
            data,
        })
    }
}

/// Reads an 8-bit image; grayscale is promoted to RGB, alpha is stripped.
/// 16-bit files are rejected rather than silently truncated.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let img = image::open(path)?;
    match img.color() {
        ColorType::L16 | ColorType::La16 | ColorType::Rgb16 | ColorType::Rgba16 => {
            return Err(Error::UnsupportedBitDepth {
                path: path.to_path_buf(),
            });
        }
        _ => {}
    }
    let rgb = match img {
        DynamicImage::ImageRgb8(i) => i,
        other => other.to_rgb8(),
    };
    let (width, height) = (rgb.width(), rgb.height());
    Ok(ImageBuffer {
        width,
        height,
        data: rgb.into_raw(),
    })
}

pub fn write_image(buffer: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let img: image::RgbImage =
        image::ImageBuffer::from_raw(buffer.width, buffer.height, buffer.data.clone())
            .expect("buffer length is validated at construction");
    img.save(path.as_ref())?;
    Ok(())
}
