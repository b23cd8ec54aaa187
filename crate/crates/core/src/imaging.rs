//! RGB float images and file I/O.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb, Rgb32FImage, RgbImage};

use crate::error::{Error, Result};
use crate::model::CHANNELS;
use crate::ndgrad::{Real, Tensor};

/// Row-major `height x width x 3` pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * CHANNELS {
            return Err(Error::invalid(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.height, self.width, CHANNELS],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("image extents are validated on construction")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [h, w, CHANNELS] => {
                Self::new(h, w, t.data().iter().map(|v| v.to_f64() as f32).collect())
            }
            _ => Err(Error::invalid(format!(
                "expected an H x W x 3 tensor, got {:?}",
                t.shape()
            ))),
        }
    }

    /// Stacks equally sized images into a `B x H x W x 3` tensor.
    pub fn batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("cannot batch zero images"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.height != first.height || img.width != first.width {
                return Err(Error::Shape {
                    op: "batch",
                    lhs: vec![first.height, first.width],
                    rhs: vec![img.height, img.width],
                });
            }
            data.extend(img.data.iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::new(&[images.len(), first.height, first.width, CHANNELS], data)
    }

    /// Centered `h x w` window.
    pub fn center_crop(&self, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || h > self.height || w > self.width {
            return Err(Error::invalid(format!(
                "cannot crop {h}x{w} out of {}x{}",
                self.height, self.width
            )));
        }
        let y0 = (self.height - h) / 2;
        let x0 = (self.width - w) / 2;
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * CHANNELS;
            data.extend_from_slice(&self.data[row..row + w * CHANNELS]);
        }
        Self::new(h, w, data)
    }

    /// Largest centered crop whose sides are multiples of `multiple`.
    pub fn crop_to_multiple(&self, multiple: usize) -> Result<Self> {
        let h = self.height / multiple * multiple;
        let w = self.width / multiple * multiple;
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "{}x{} image is smaller than one {multiple}x{multiple} patch",
                self.height, self.width
            )));
        }
        self.center_crop(h, w)
    }

    /// Center square crop, then bilinear resize to `size x size`.
    pub fn square_resized(&self, size: usize) -> Result<Self> {
        let side = self.height.min(self.width);
        let sq = self.center_crop(side, side)?;
        if side == size {
            return Ok(sq);
        }
        let buf: Rgb32FImage = ImageBuffer::from_raw(side as u32, side as u32, sq.data)
            .expect("buffer length matches extents");
        let out = imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
        let data = out
            .into_raw()
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Self::new(size, size, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches extents")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}

/// Decodes any supported file to RGB floats; 8- and 16-bit inputs are divided
/// by their peak value.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .into_raw()
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Image::new(h as usize, w as usize, data)
}

/// Writes a 16-bit PNG; used by tests and the synthetic corpus writer.
pub fn save_png16(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u16> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, raw)
            .expect("buffer length matches extents");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
