//! Training-mask sources and an on-disk cache keyed by image content.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::detector::Detection;
use crate::error::Result;
use crate::image::Image;
use crate::mask_gen::{generate_mask, BinaryMask, Polarity};

/// Where the foreground used for alignment comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    /// Marker-controlled watershed on the RGB image.
    Watershed,
    /// Every pixel counts as foreground.
    AllForeground,
    /// Union of the RGB detector's predicted boxes.
    DetectorBoxes,
}

/// Refined full-resolution FG masks, optionally persisted as PNGs named by
/// the SHA-256 of the RGB image's 8-bit samples.
#[derive(Clone, Debug, Default)]
pub struct MaskCache {
    pub dir: Option<PathBuf>,
}

pub fn content_key(rgb: &Image) -> String {
    let mut h = Sha256::new();
    h.update((rgb.channels() as u64).to_le_bytes());
    h.update((rgb.height() as u64).to_le_bytes());
    h.update((rgb.width() as u64).to_le_bytes());
    let bytes: Vec<u8> = rgb.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    h.update(&bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl MaskCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir }
    }

    pub fn watershed(&self, rgb: &Image) -> Result<BinaryMask> {
        let Some(dir) = &self.dir else {
            return generate_mask(rgb, Polarity::ForegroundOne);
        };
        let path = dir.join(format!("{}.png", content_key(rgb)));
        if path.is_file() {
            if let Ok(m) = Image::load(&path, 1).and_then(|img| BinaryMask::from_image(&img, Polarity::ForegroundOne)) {
                if m.dims() == rgb.dims() {
                    return Ok(m);
                }
            }
            log::warn!("ignoring unreadable cached mask {}", path.display());
        }
        let m = generate_mask(rgb, Polarity::ForegroundOne)?;
        std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
        m.to_image().save(&path)?;
        Ok(m)
    }
}

/// Foreground = pixels whose centers fall inside any detection box.
pub fn boxes_to_mask(dets: &[Detection], height: usize, width: usize) -> BinaryMask {
    let mut bits = vec![0u8; height * width];
    for d in dets {
        let b = d.bbox;
        for y in 0..height {
            let cy = y as f32 + 0.5;
            if cy < b.ymin || cy > b.ymax {
                continue;
            }
            for x in 0..width {
                let cx = x as f32 + 0.5;
                if cx >= b.xmin && cx <= b.xmax {
                    bits[y * width + x] = 1;
                }
            }
        }
    }
    BinaryMask::new(height, width, bits, Polarity::ForegroundOne).expect("dims")
}
