//! Square grayscale images in `[0, 1]`, PNG IO, and tensor conversion.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{GrayImage as PngGray, ImageBuffer, Luma};

use crate::error::{Error, Result};

/// A square single-channel image with pixel values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    size: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(size: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::Input(format!(
                "expected {} pixels for a {size}x{size} image, got {}",
                size * size,
                pixels.len()
            )));
        }
        Ok(Self { size, pixels })
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            pixels: vec![0.0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.size + x]
    }

    /// 8-bit quantization, the on-disk representation.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(size: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(size, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Round-trips through 8 bits so in-memory images match what a reader of
    /// the PNG would see.
    pub fn quantized(&self) -> Self {
        Self::from_bytes(self.size, &self.to_bytes()).expect("same size")
    }

    pub fn resized(&self, size: usize) -> Self {
        if size == self.size {
            return self.clone();
        }
        let buf: PngGray = ImageBuffer::from_raw(self.size as u32, self.size as u32, self.to_bytes())
            .expect("buffer matches dimensions");
        let out = image::imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
        Self::from_bytes(size, out.as_raw()).expect("resize output matches dimensions")
    }
}

pub fn save_png(path: &Path, img: &GrayImage) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.size as u32, img.size as u32, img.to_bytes())
            .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Loads an 8-bit grayscale PNG (other formats are converted to luma) and
/// resizes it to `size` if needed.
pub fn load_png(path: &Path, size: usize) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let gray = if w as usize != size || h as usize != size {
        image::imageops::resize(&gray, size as u32, size as u32, FilterType::Triangle)
    } else {
        gray
    };
    GrayImage::from_bytes(size, gray.as_raw())
}

/// Stacks images into a `(batch, 1, size, size)` tensor.
pub fn batch_tensor(images: &[&GrayImage], device: &Device) -> Result<Tensor> {
    let size = images
        .first()
        .map(|i| i.size)
        .ok_or_else(|| Error::Input("empty image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.size != size {
            return Err(Error::Input(format!(
                "mixed image sizes in batch: {} vs {size}",
                img.size
            )));
        }
        data.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, size, size), device)?)
}

/// Splits a `(batch, 1, h, w)` tensor back into images, clamping to `[0, 1]`.
pub fn images_from_tensor(t: &Tensor) -> Result<Vec<GrayImage>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 || h != w {
        return Err(Error::Input(format!(
            "expected (b, 1, s, s) tensor, got {:?}",
            t.dims()
        )));
    }
    let flat: Vec<f32> = t.flatten_all()?.to_vec1()?;
    Ok((0..b)
        .map(|i| GrayImage {
            size: h,
            pixels: flat[i * h * w..(i + 1) * h * w]
                .iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect(),
        })
        .collect())
}

/// Tiles images into a single grid image, `columns` wide, with a one-pixel
/// white separator.
pub fn grid(images: &[GrayImage], columns: usize) -> Result<GrayImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("no images for grid".into()))?;
    let s = first.size;
    let columns = columns.max(1).min(images.len());
    let rows = images.len().div_ceil(columns);
    let side = (s + 1) * columns.max(rows) + 1;
    let mut pixels = vec![1.0f32; side * side];
    for (k, img) in images.iter().enumerate() {
        let (r, c) = (k / columns, k % columns);
        for y in 0..s {
            for x in 0..s {
                let (gy, gx) = (1 + r * (s + 1) + y, 1 + c * (s + 1) + x);
                pixels[gy * side + gx] = img.get(y, x);
            }
        }
    }
    GrayImage::new(side, pixels)
}
