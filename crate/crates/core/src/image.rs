//! Planar floating-point images and PNG I/O.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `C x H x W` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
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

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
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

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.channels, self.height, self.width], self.data.clone()).expect("image dims")
    }

    /// Loads an 8-bit PNG (or any format the `image` crate decodes) as
    /// either 1 or 3 channels.
    pub fn load(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        match channels {
            1 => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                let data = g.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
                Image::new(1, h as usize, w as usize, data)
            }
            3 => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                let (w, h) = (w as usize, h as usize);
                let mut data = vec![0.0; 3 * w * h];
                for (i, p) in rgb.pixels().enumerate() {
                    for c in 0..3 {
                        data[c * w * h + i] = p.0[c] as f32 / 255.0;
                    }
                }
                Image::new(3, h, w, data)
            }
            other => Err(Error::InvalidInput(format!("cannot load {other}-channel images"))),
        }
    }

    /// Quantizes to 8 bits and writes a PNG.
    pub fn save(&self, path: &Path) -> Result<()> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => {
                let buf: GrayImage =
                    ImageBuffer::from_fn(w, h, |x, y| Luma([q(self.get(0, y as usize, x as usize))]));
                buf.save(path)
            }
            3 => {
                let buf: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
                    let (x, y) = (x as usize, y as usize);
                    Rgb([q(self.get(0, y, x)), q(self.get(1, y, x)), q(self.get(2, y, x))])
                });
                buf.save(path)
            }
            other => return Err(Error::InvalidInput(format!("cannot save {other}-channel images"))),
        };
        res.map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    /// Rounds every value to the nearest 8-bit level, matching what a PNG
    /// round trip produces.
    pub fn quantized(&self) -> Image {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        out
    }
}

/// A co-registered RGB image and single-channel thermal image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub rgb: Image,
    pub thermal: Image,
}

impl ImagePair {
    pub fn new(rgb: Image, thermal: Image) -> Result<Self> {
        if rgb.channels() != 3 {
            return Err(Error::InvalidInput(format!("RGB image has {} channels", rgb.channels())));
        }
        if thermal.channels() != 1 {
            return Err(Error::InvalidInput(format!("thermal image has {} channels", thermal.channels())));
        }
        if rgb.dims() != thermal.dims() {
            return Err(Error::InvalidInput(format!(
                "unregistered pair: RGB {:?} vs thermal {:?}",
                rgb.dims(),
                thermal.dims()
            )));
        }
        Ok(Self { rgb, thermal })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.rgb.dims()
    }

    pub fn load(rgb: &Path, thermal: &Path) -> Result<Self> {
        Self::new(Image::load(rgb, 3)?, Image::load(thermal, 1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i as f32) / 60.0).collect();
        let img = Image::new(3, 4, 5, data).unwrap();
        let path = dir.path().join("a.png");
        img.save(&path).unwrap();
        let back = Image::load(&path, 3).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn pair_rejects_mismatched_dims() {
        let rgb = Image::filled(3, 4, 4, 0.0);
        let t = Image::filled(1, 4, 8, 0.0);
        assert!(ImagePair::new(rgb, t).is_err());
        assert!(ImagePair::new(Image::filled(1, 4, 4, 0.0), Image::filled(1, 4, 4, 0.0)).is_err());
    }
}
