//! Planar float images and binary masks, with 8-bit PNG IO.

use std::path::Path;

use crate::error::{ensure_dims, Error, Result};
use crate::tensor::{Real, Tensor};

/// Channel-major (CHW) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Luma weights for RGB → gray.
pub const GRAY_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure_dims!(
            data.len() == channels * height * width,
            "image {channels}x{height}x{width} needs {} values, got {}",
            channels * height * width,
            data.len()
        );
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Grayscale version (identity for single-channel images).
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let data = (0..n)
            .map(|i| {
                GRAY_WEIGHTS[0] * self.data[i]
                    + GRAY_WEIGHTS[1] * self.data[n + i]
                    + GRAY_WEIGHTS[2] * self.data[2 * n + i]
            })
            .collect();
        Image {
            channels: 1,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// `1 × C × H × W` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("image buffer matches its shape")
    }

    /// Image from a `1 × C × H × W` (or `C × H × W`) tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Image> {
        let (c, h, w) = match t.shape() {
            [1, c, h, w] | [c, h, w] => (*c, *h, *w),
            s => return Err(Error::Dimension(format!("cannot view tensor {s:?} as an image"))),
        };
        Image::new(c, h, w, t.data().iter().map(|v| v.to_f64_lossy() as f32).collect())
    }

    /// Zeroes every pixel where `keep` is false.
    pub fn masked(&self, keep: &Mask) -> Result<Image> {
        ensure_dims!(
            keep.height == self.height && keep.width == self.width,
            "mask {}x{} does not match image {}x{}",
            keep.height,
            keep.width,
            self.height,
            self.width
        );
        let n = self.height * self.width;
        let mut out = self.clone();
        for c in 0..self.channels {
            for (v, &k) in out.data[c * n..(c + 1) * n].iter_mut().zip(&keep.data) {
                if !k {
                    *v = 0.0;
                }
            }
        }
        Ok(out)
    }

    /// Rounds every value to the nearest multiple of 1/255, the precision of
    /// an 8-bit PNG.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let n = self.height * self.width;
        let res = match self.channels {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
                image::GrayImage::from_raw(w, h, buf)
                    .expect("buffer size")
                    .save(path)
            }
            3 => {
                let mut buf = Vec::with_capacity(3 * n);
                for i in 0..n {
                    for c in 0..3 {
                        buf.push(to_u8(self.data[c * n + i]));
                    }
                }
                image::RgbImage::from_raw(w, h, buf)
                    .expect("buffer size")
                    .save(path)
            }
            c => return Err(Error::Contract(format!("cannot write {c}-channel image as PNG"))),
        };
        res.map_err(|e| image_error(path, e))
    }

    /// Loads an 8-bit PNG as RGB (three channels) or gray (one channel).
    pub fn load_png(path: &Path, channels: usize) -> Result<Image> {
        let img = image::open(path).map_err(|e| image_error(path, e))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match channels {
            1 => {
                let g = img.to_luma8();
                Image::new(1, h, w, g.as_raw().iter().map(|&v| v as f32 / 255.0).collect())
            }
            3 => {
                let rgb = img.to_rgb8();
                let raw = rgb.as_raw();
                let n = h * w;
                let mut data = vec![0.0; 3 * n];
                for i in 0..n {
                    for c in 0..3 {
                        data[c * n + i] = raw[3 * i + c] as f32 / 255.0;
                    }
                }
                Image::new(3, h, w, data)
            }
            c => Err(Error::Contract(format!("cannot load PNG as {c} channels"))),
        }
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

/// Binary per-pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        ensure_dims!(
            data.len() == height * width,
            "mask {height}x{width} needs {} values, got {}",
            height * width,
            data.len()
        );
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Mask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn inverted(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer size")
            .save(path)
            .map_err(|e| image_error(path, e))
    }

    /// Loads a single-channel PNG; any nonzero value is foreground.
    pub fn load_png(path: &Path) -> Result<Mask> {
        let img = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Mask::new(h, w, img.as_raw().iter().map(|&v| v > 127).collect())
    }
}
