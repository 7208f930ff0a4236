//! Interleaved RGB images and binary PNM (P6 / P5) input-output.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major, channel-interleaved RGB image with values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Scalar> RgbImage<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(
                "RgbImage::new",
                format!("{width}x{height} needs {} values, got {}", width * height * 3, data.len()),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [T; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [T; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [T; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [T; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Planar `[3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            self.data[(i % plane) * 3 + i / plane]
        })
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let &[3, height, width] = t.shape() else {
            return Err(Error::shape("RgbImage::from_tensor", format!("expected [3,H,W], got {:?}", t.shape())));
        };
        let plane = width * height;
        let data = (0..plane * 3).map(|i| t.data()[(i % 3) * plane + i / 3]).collect();
        Self::new(width, height, data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> RgbImage<U> {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// 8-bit quantization with clamping to [0, 1].
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let scale = T::lit(1.0 / 255.0);
        Self::new(width, height, bytes.iter().map(|&b| T::lit(f64::from(b)) * scale).collect())
    }
}

fn quantize<T: Scalar>(v: T) -> u8 {
    let v = v.to_f64_lossy();
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

fn encode_p6(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    PnmEncoder::new(&mut writer)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(rgb, width as u32, height as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::format("PNM", format!("{}: {e}", path.display())))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Writes a binary P6 file.
pub fn write_ppm<T: Scalar>(path: &Path, image: &RgbImage<T>) -> Result<()> {
    encode_p6(path, image.width, image.height, &image.to_bytes())
}

/// Writes a single-channel map as a gray P6 file (equal R, G and B).
pub fn write_gray_ppm<T: Scalar>(path: &Path, width: usize, height: usize, values: &[T]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape("write_gray_ppm", format!("{width}x{height} vs {} values", values.len())));
    }
    let rgb: Vec<u8> = values.iter().flat_map(|&v| [quantize(v); 3]).collect();
    encode_p6(path, width, height, &rgb)
}

/// Reads a binary or ASCII PNM file; gray images are replicated to RGB.
pub fn read_pnm<T: Scalar>(path: &Path) -> Result<RgbImage<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|detail| Error::format("PNM", format!("{}: {detail}", path.display())))
}

fn decode_pnm<T: Scalar>(bytes: &[u8]) -> std::result::Result<RgbImage<T>, String> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm).map_err(|e| e.to_string())?;
    let rgb = img.to_rgb8();
    RgbImage::from_bytes(rgb.width() as usize, rgb.height() as usize, rgb.as_raw()).map_err(|e| e.to_string())
}
