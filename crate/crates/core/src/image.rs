//! RGB images in `[0, 1]` and their 8-bit PNG form.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::diffcore::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Row-major `height x width x 3` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = std::iter::repeat_n(rgb, width * height).flatten().collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * CHANNELS {
            return Err(Error::ValueCount {
                shape: vec![height, width, CHANNELS],
                count: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Flattened length `W * H * C`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    /// Clamps every value into `[0, 1]`.
    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_data(
            width,
            height,
            bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }

    /// The image quantized to 8 bits and back, as stored on disk.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(self.width, self.height, &self.to_rgb8()).expect("same size")
    }

    /// `[W * H * C]` tensor view.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.data.len()],
            self.data.iter().map(|&v| T::of(f64::from(v))).collect(),
        )
        .expect("non-empty image")
    }

    pub fn from_tensor<T: Scalar>(width: usize, height: usize, t: &Tensor<T>) -> Result<Self> {
        Self::from_data(
            width,
            height,
            t.data().iter().map(|v| v.as_f64() as f32).collect(),
        )
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, &self.to_rgb8())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, bytes) = read_png(path)?;
        Self::from_rgb8(w, h, &bytes)
    }
}

/// Stacks images into a `[batch, W * H * C]` tensor.
pub fn batch_tensor<'a, T: Scalar>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut width = None;
    for img in images {
        match width {
            None => width = Some(img.len()),
            Some(w) if w != img.len() => {
                return Err(Error::shape("batch_tensor", &[w], &[img.len()]));
            }
            _ => {}
        }
        data.extend(img.data.iter().map(|&v| T::of(f64::from(v))));
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::Invalid("empty image batch".into()))?;
    Tensor::new(&[rows, width], data)
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .finish()
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit RGB"));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}
