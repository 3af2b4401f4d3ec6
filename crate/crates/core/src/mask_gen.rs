//! Foreground/background masks from RGB intensity.
//!
//! The chain is: grayscale, two-threshold markers, Sobel elevation,
//! marker-driven priority flooding, then opening, closing and one dilation
//! with the 4-connected 3x3 cross. Masks are finally resampled to each
//! pyramid level.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::image::Image;

/// Below this grayscale intensity a pixel is a background marker.
pub const BG_MARKER_MAX: f32 = 20.0 / 255.0;
/// Above this grayscale intensity a pixel is a foreground marker.
pub const FG_MARKER_MIN: f32 = 100.0 / 255.0;

pub const UNMARKED: u8 = 0;
pub const BG_LABEL: u8 = 1;
pub const FG_LABEL: u8 = 2;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MarkerMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl MarkerMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!("{height}x{width} marker map needs {} labels", height * width)));
        }
        if labels.iter().any(|&l| l > FG_LABEL) {
            return Err(Error::InvalidInput("marker labels must be 0, 1 or 2".into()));
        }
        Ok(Self { height, width, labels })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Renders labels as 0 / 127 / 255 gray levels for inspection.
    pub fn to_image(&self) -> Image {
        let data = self.labels.iter().map(|&l| l as f32 / 2.0).collect();
        Image::new(1, self.height, self.width, data).expect("dims")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    /// Foreground pixels carry 1 (used for training alignment).
    ForegroundOne,
    /// Background pixels carry 1 (used for inference fusion).
    BackgroundOne,
}

impl Polarity {
    pub fn flipped(self) -> Self {
        match self {
            Polarity::ForegroundOne => Polarity::BackgroundOne,
            Polarity::BackgroundOne => Polarity::ForegroundOne,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
    polarity: Polarity,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>, polarity: Polarity) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!("{height}x{width} mask needs {} bits", height * width)));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidInput("mask bits must be 0 or 1".into()));
        }
        Ok(Self { height, width, bits, polarity })
    }

    pub fn filled(height: usize, width: usize, bit: u8, polarity: Polarity) -> Self {
        Self { height, width, bits: vec![bit.min(1); height * width], polarity }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.bits[y * self.width + x]
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Flips every bit and the polarity tag.
    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
            polarity: self.polarity.flipped(),
        }
    }

    pub fn with_polarity(&self, polarity: Polarity) -> Self {
        if polarity == self.polarity {
            self.clone()
        } else {
            self.inverted()
        }
    }

    /// Whether pixel `(y, x)` is foreground, regardless of polarity.
    #[inline]
    pub fn is_foreground(&self, y: usize, x: usize) -> bool {
        (self.get(y, x) == 1) == (self.polarity == Polarity::ForegroundOne)
    }

    pub fn to_weights(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    /// Renders as a {0, 255} single-channel image.
    pub fn to_image(&self) -> Image {
        let data = self.bits.iter().map(|&b| b as f32).collect();
        Image::new(1, self.height, self.width, data).expect("dims")
    }

    /// Reads a {0, 255} single-channel image (threshold at one half).
    pub fn from_image(img: &Image, polarity: Polarity) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::InvalidInput("mask images must be single-channel".into()));
        }
        let bits = img.data().iter().map(|&v| u8::from(v >= 0.5)).collect();
        Self::new(img.height(), img.width(), bits, polarity)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElevationMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ElevationMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!("{height}x{width} elevation needs {} values", height * width)));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput("elevation must be finite and non-negative".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Scales to `[0, 1]` by the maximum for inspection.
    pub fn to_image(&self) -> Image {
        let max = self.values.iter().cloned().fold(0.0f32, f32::max);
        let k = if max > 0.0 { 1.0 / max } else { 0.0 };
        let data = self.values.iter().map(|v| v * k).collect();
        Image::new(1, self.height, self.width, data).expect("dims")
    }
}

pub fn to_grayscale(rgb: &Image) -> Result<Image> {
    if rgb.channels() != 3 {
        return Err(Error::InvalidInput(format!("grayscale needs 3 channels, got {}", rgb.channels())));
    }
    let n = rgb.height() * rgb.width();
    let (r, g, b) = (rgb.plane(0), rgb.plane(1), rgb.plane(2));
    let data = (0..n).map(|i| LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i]).collect();
    Image::new(1, rgb.height(), rgb.width(), data)
}

pub fn make_markers(gray: &Image) -> MarkerMap {
    let labels = gray
        .plane(0)
        .iter()
        .map(|&v| {
            if v < BG_MARKER_MAX {
                BG_LABEL
            } else if v > FG_MARKER_MIN {
                FG_LABEL
            } else {
                UNMARKED
            }
        })
        .collect();
    MarkerMap { height: gray.height(), width: gray.width(), labels }
}

/// Gradient magnitude of the 3x3 Sobel pair with edge-replicated borders.
pub fn sobel_elevation(gray: &Image) -> Result<ElevationMap> {
    let (h, w) = gray.dims();
    if h < 3 || w < 3 {
        return Err(Error::InvalidInput(format!("Sobel needs at least 3x3 pixels, got {h}x{w}")));
    }
    let px = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        gray.get(0, yy, xx)
    };
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
            let gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
            values.push((gx * gx + gy * gy).sqrt());
        }
    }
    Ok(ElevationMap { height: h, width: w, values })
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    elevation: f32,
    age: u64,
    index: usize,
    label: u8,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    // Reversed: BinaryHeap is a max-heap and we want the lowest
    // (elevation, age) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .elevation
            .total_cmp(&self.elevation)
            .then_with(|| other.age.cmp(&self.age))
    }
}

/// 4-neighbours of `i` in up, left, right, down order.
fn neighbours(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (i / w, i % w);
    [
        (y > 0).then(|| i - w),
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}

/// Meyer flooding of `elevation` from `markers`.
///
/// Each unmarked pixel is labelled by the pixel that first enqueued it.
/// The queue is ordered by elevation, then by enqueue time; simultaneous
/// seeds are enqueued in row-major order. Marker maps lacking foreground
/// (or background) seeds short-circuit to an all-background (all-foreground)
/// mask.
pub fn watershed_flood(elevation: &ElevationMap, markers: &MarkerMap) -> Result<BinaryMask> {
    if elevation.dims() != markers.dims() {
        return Err(Error::Shape(format!(
            "elevation {:?} vs markers {:?}",
            elevation.dims(),
            markers.dims()
        )));
    }
    let (h, w) = markers.dims();
    let fg = markers.count(FG_LABEL);
    let bg = markers.count(BG_LABEL);
    if fg == 0 {
        return Ok(BinaryMask::filled(h, w, 0, Polarity::ForegroundOne));
    }
    if bg == 0 {
        return Ok(BinaryMask::filled(h, w, 1, Polarity::ForegroundOne));
    }

    let mut labels = markers.labels.clone();
    let mut queued = vec![false; h * w];
    let mut heap = BinaryHeap::new();
    let mut age = 0u64;
    let mut enqueue_from = |i: usize, label: u8, labels: &[u8], queued: &mut [bool], heap: &mut BinaryHeap<Entry>| {
        for nb in neighbours(i, h, w) {
            if labels[nb] == UNMARKED && !queued[nb] {
                queued[nb] = true;
                heap.push(Entry { elevation: elevation.values[nb], age, index: nb, label });
                age += 1;
            }
        }
    };
    for i in 0..h * w {
        if labels[i] != UNMARKED {
            enqueue_from(i, labels[i], &labels, &mut queued, &mut heap);
        }
    }
    while let Some(e) = heap.pop() {
        labels[e.index] = e.label;
        enqueue_from(e.index, e.label, &labels, &mut queued, &mut heap);
    }
    debug_assert!(labels.iter().all(|&l| l != UNMARKED));
    let bits = labels.iter().map(|&l| u8::from(l == FG_LABEL)).collect();
    Ok(BinaryMask { height: h, width: w, bits, polarity: Polarity::ForegroundOne })
}

fn cross_op(bits: &[u8], h: usize, w: usize, dilate: bool) -> Vec<u8> {
    (0..h * w)
        .map(|i| {
            let mut v = bits[i];
            for nb in neighbours(i, h, w) {
                if dilate {
                    v |= bits[nb];
                } else {
                    v &= bits[nb];
                }
            }
            v
        })
        .collect()
}

/// Dilation of the one-bits with the 3x3 cross; out-of-image pixels are ignored.
pub fn dilate(mask: &BinaryMask) -> BinaryMask {
    BinaryMask { bits: cross_op(&mask.bits, mask.height, mask.width, true), ..mask.clone() }
}

/// Erosion of the one-bits with the 3x3 cross; out-of-image pixels are ignored.
pub fn erode(mask: &BinaryMask) -> BinaryMask {
    BinaryMask { bits: cross_op(&mask.bits, mask.height, mask.width, false), ..mask.clone() }
}

pub fn opening(mask: &BinaryMask) -> BinaryMask {
    dilate(&erode(mask))
}

pub fn closing(mask: &BinaryMask) -> BinaryMask {
    erode(&dilate(mask))
}

/// Opening, closing, then a single dilation of the foreground.
pub fn refine_mask(mask: &BinaryMask) -> BinaryMask {
    let fg = mask.with_polarity(Polarity::ForegroundOne);
    dilate(&closing(&opening(&fg)))
}

/// Nearest-neighbour downsampling sampling source pixel
/// `floor((t + 0.5) * src / dst)` on each axis, then polarity conversion.
pub fn resize_mask(mask: &BinaryMask, target: (usize, usize), polarity: Polarity) -> Result<BinaryMask> {
    let (h, w) = mask.dims();
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > h || tw > w {
        return Err(Error::InvalidInput(format!("cannot resize {h}x{w} mask to {th}x{tw}")));
    }
    let src = |t: usize, dst: usize, size: usize| ((2 * t + 1) * size) / (2 * dst);
    let mut bits = Vec::with_capacity(th * tw);
    for ty in 0..th {
        let sy = src(ty, th, h);
        for tx in 0..tw {
            bits.push(mask.get(sy, src(tx, tw, w)));
        }
    }
    let out = BinaryMask { height: th, width: tw, bits, polarity: mask.polarity };
    Ok(out.with_polarity(polarity))
}

/// Intermediate products of the mask chain.
#[derive(Clone, Debug)]
pub struct MaskStages {
    pub gray: Image,
    pub markers: MarkerMap,
    pub elevation: ElevationMap,
    pub flooded: BinaryMask,
    pub refined: BinaryMask,
}

pub fn mask_stages(rgb: &Image) -> Result<MaskStages> {
    let gray = to_grayscale(rgb)?;
    let markers = make_markers(&gray);
    let elevation = sobel_elevation(&gray)?;
    let flooded = watershed_flood(&elevation, &markers)?;
    let refined = refine_mask(&flooded);
    Ok(MaskStages { gray, markers, elevation, flooded, refined })
}

/// Full-resolution refined mask in the requested polarity.
pub fn generate_mask(rgb: &Image, polarity: Polarity) -> Result<BinaryMask> {
    Ok(mask_stages(rgb)?.refined.with_polarity(polarity))
}

pub fn generate_level_masks(rgb: &Image, level_dims: &[(usize, usize)], polarity: Polarity) -> Result<Vec<BinaryMask>> {
    let full = generate_mask(rgb, Polarity::ForegroundOne)?;
    resize_to_levels(&full, level_dims, polarity)
}

pub fn resize_to_levels(full: &BinaryMask, level_dims: &[(usize, usize)], polarity: Polarity) -> Result<Vec<BinaryMask>> {
    level_dims.iter().map(|&d| resize_mask(full, d, polarity)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(h: usize, w: usize, v: Vec<f32>) -> Image {
        Image::new(1, h, w, v).unwrap()
    }

    fn mask(h: usize, w: usize, bits: &[u8]) -> BinaryMask {
        BinaryMask::new(h, w, bits.to_vec(), Polarity::ForegroundOne).unwrap()
    }

    #[test]
    fn grayscale_fixed_points() {
        for v in [1.0f32, 0.0, 0.5] {
            let rgb = Image::filled(3, 1, 1, v);
            assert!((to_grayscale(&rgb).unwrap().get(0, 0, 0) - v).abs() < 1e-6);
        }
        assert!(to_grayscale(&Image::filled(1, 2, 2, 0.0)).is_err());
    }

    #[test]
    fn marker_thresholds() {
        let m = make_markers(&gray(1, 3, vec![0.05, 0.5, 0.2]));
        assert_eq!(m.labels(), &[BG_LABEL, FG_LABEL, UNMARKED]);
    }

    #[test]
    fn sobel_constant_and_step() {
        let e = sobel_elevation(&Image::filled(1, 5, 5, 0.3)).unwrap();
        assert!(e.values().iter().all(|&v| v == 0.0));

        let mut data = vec![0.0; 5 * 6];
        for y in 0..5 {
            for x in 3..6 {
                data[y * 6 + x] = 1.0;
            }
        }
        let e = sobel_elevation(&gray(5, 6, data)).unwrap();
        for y in 0..5 {
            let row = &e.values()[y * 6..(y + 1) * 6];
            // Edge between columns 2 and 3: both respond with 4, others 0.
            assert_eq!(row, &[0.0, 0.0, 4.0, 4.0, 0.0, 0.0]);
        }
        assert!(sobel_elevation(&gray(2, 5, vec![0.0; 10])).is_err());
    }

    #[test]
    fn sobel_matches_hand_convolution_on_random_5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let data: Vec<f32> = (0..25).map(|_| rng.random()).collect();
        let img = gray(5, 5, data.clone());
        let e = sobel_elevation(&img).unwrap();
        // Pad by replication, then correlate with explicit kernels.
        let mut pad = [[0.0f32; 7]; 7];
        for (py, row) in pad.iter_mut().enumerate() {
            for (px, v) in row.iter_mut().enumerate() {
                let y = (py as isize - 1).clamp(0, 4) as usize;
                let x = (px as isize - 1).clamp(0, 4) as usize;
                *v = data[y * 5 + x];
            }
        }
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        for y in 0..5 {
            for x in 0..5 {
                let (mut gx, mut gy) = (0.0f32, 0.0f32);
                for i in 0..3 {
                    for j in 0..3 {
                        gx += kx[i][j] * pad[y + i][x + j];
                        gy += ky[i][j] * pad[y + i][x + j];
                    }
                }
                let want = (gx * gx + gy * gy).sqrt();
                assert!((e.values()[y * 5 + x] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn flood_with_everything_marked_is_identity() {
        let m = MarkerMap::new(2, 2, vec![1, 2, 2, 1]).unwrap();
        let e = ElevationMap::new(2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(watershed_flood(&e, &m).unwrap().bits(), &[0, 1, 1, 0]);
    }

    #[test]
    fn flood_hand_simulated_row() {
        // gray (0.0, 0.2, 0.9, 0.2, 0.0); with edge replication the Sobel
        // response on a single row is 4 * |I[x+1] - I[x-1]|.
        let e = ElevationMap::new(1, 5, vec![0.8, 3.6, 0.0, 3.6, 0.8]).unwrap();
        let m = make_markers(&gray(1, 5, vec![0.0, 0.2, 0.9, 0.2, 0.0]));
        assert_eq!(m.labels(), &[1, 0, 2, 0, 1]);
        // Queue: pixel 1 (3.6, t0, from BG), pixel 3 (3.6, t1, from FG).
        let out = watershed_flood(&e, &m).unwrap();
        assert_eq!(out.bits(), &[0, 0, 1, 1, 0]);
    }

    #[test]
    fn flood_degenerate_markers() {
        let e = ElevationMap::new(1, 3, vec![0.0; 3]).unwrap();
        let no_fg = MarkerMap::new(1, 3, vec![1, 0, 0]).unwrap();
        assert_eq!(watershed_flood(&e, &no_fg).unwrap().ones(), 0);
        let no_bg = MarkerMap::new(1, 3, vec![0, 2, 0]).unwrap();
        assert_eq!(watershed_flood(&e, &no_bg).unwrap().ones(), 3);
    }

    #[test]
    fn refine_removes_isolated_pixels_and_pads_squares() {
        let mut bits = vec![0u8; 81];
        bits[4 * 9 + 4] = 1;
        assert_eq!(refine_mask(&mask(9, 9, &bits)).ones(), 0);

        let mut bits = vec![1u8; 81];
        bits[4 * 9 + 4] = 0;
        assert_eq!(refine_mask(&mask(9, 9, &bits)).ones(), 81);

        let mut bits = vec![0u8; 81];
        for y in 3..6 {
            for x in 3..6 {
                bits[y * 9 + x] = 1;
            }
        }
        let out = refine_mask(&mask(9, 9, &bits));
        // With the cross element, opening trims the square's corners (only
        // the centre survives erosion), closing keeps the resulting plus, and
        // the final dilation grows it to the radius-2 diamond.
        assert_eq!(out.ones(), 13);
        for y in 0..9i32 {
            for x in 0..9i32 {
                let inside = (y - 4).abs() + (x - 4).abs() <= 2;
                assert_eq!(out.get(y as usize, x as usize), u8::from(inside), "({y},{x})");
            }
        }
    }

    #[test]
    fn resize_examples() {
        let full = BinaryMask::filled(4, 4, 1, Polarity::ForegroundOne);
        assert_eq!(resize_mask(&full, (2, 2), Polarity::ForegroundOne).unwrap().bits(), &[1; 4]);
        assert_eq!(resize_mask(&full, (2, 2), Polarity::BackgroundOne).unwrap().bits(), &[0; 4]);
        let checker: Vec<u8> = (0..16).map(|i| (((i / 4) + (i % 4)) % 2) as u8).collect();
        let small = resize_mask(&mask(4, 4, &checker), (2, 2), Polarity::ForegroundOne).unwrap();
        // Anchors are (1,1), (1,3), (3,1), (3,3): all even parity.
        let want: Vec<u8> = [(1, 1), (1, 3), (3, 1), (3, 3)].iter().map(|&(y, x)| checker[y * 4 + x]).collect();
        assert_eq!(small.bits(), want.as_slice());
        assert!(resize_mask(&full, (8, 8), Polarity::ForegroundOne).is_err());
    }

    #[test]
    fn uniform_images_give_uniform_levels() {
        let dims = [(16, 16), (8, 8), (4, 4), (2, 2), (1, 1)];
        for (v, want) in [(0.0f32, 0u8), (1.0, 1)] {
            let levels = generate_level_masks(&Image::filled(3, 32, 32, v), &dims, Polarity::ForegroundOne).unwrap();
            assert!(levels.iter().all(|m| m.bits().iter().all(|&b| b == want)));
        }
    }

    #[test]
    fn bright_blob_appears_at_every_level() {
        let (h, w) = (64usize, 64usize);
        let mut rgb = Image::filled(3, h, w, 0.02);
        let (cy, cx, r) = (40.0f32, 24.0f32, 14.0f32);
        for y in 0..h {
            for x in 0..w {
                if ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt() <= r {
                    for c in 0..3 {
                        rgb.set(c, y, x, 0.8);
                    }
                }
            }
        }
        let dims = [(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)];
        let levels = generate_level_masks(&rgb, &dims, Polarity::ForegroundOne).unwrap();
        for (m, &(lh, lw)) in levels.iter().zip(&dims) {
            let sy = (cy * lh as f32 / h as f32) as usize;
            let sx = (cx * lw as f32 / w as f32) as usize;
            assert_eq!(m.get(sy.min(lh - 1), sx.min(lw - 1)), 1, "level {lh}");
            // Far corner stays background.
            assert_eq!(m.get(0, lw - 1), 0);
        }
    }

    /// Independent flood: linear scan for the lowest (elevation, time) among
    /// queued pixels, no heap.
    fn reference_flood(elev: &[f32], markers: &[u8], h: usize, w: usize) -> Vec<u8> {
        if !markers.contains(&2) {
            return vec![0; h * w];
        }
        if !markers.contains(&1) {
            return vec![1; h * w];
        }
        let mut lab = markers.to_vec();
        let mut queue: Vec<(f32, usize, usize, u8)> = Vec::new(); // (elev, time, idx, label)
        let mut seen = vec![false; h * w];
        let mut time = 0;
        let push_nbrs = |i: usize, l: u8, lab: &[u8], seen: &mut Vec<bool>, queue: &mut Vec<(f32, usize, usize, u8)>, time: &mut usize| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for (dy, dx) in [(-1isize, 0isize), (0, -1), (0, 1), (1, 0)] {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if lab[j] == 0 && !seen[j] {
                    seen[j] = true;
                    queue.push((elev[j], *time, j, l));
                    *time += 1;
                }
            }
        };
        for i in 0..h * w {
            if lab[i] != 0 {
                let l = lab[i];
                push_nbrs(i, l, &lab, &mut seen, &mut queue, &mut time);
            }
        }
        while !queue.is_empty() {
            let mut best = 0;
            for k in 1..queue.len() {
                let (a, b) = (queue[k], queue[best]);
                if a.0 < b.0 || (a.0 == b.0 && a.1 < b.1) {
                    best = k;
                }
            }
            let (_, _, i, l) = queue.swap_remove(best);
            lab[i] = l;
            push_nbrs(i, l, &lab, &mut seen, &mut queue, &mut time);
        }
        lab.iter().map(|&l| u8::from(l == 2)).collect()
    }

    #[test]
    fn flood_matches_reference_on_random_8x8() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f32> = (0..64).map(|_| rng.random()).collect();
            let img = gray(8, 8, g);
            let markers = make_markers(&img);
            let elev = sobel_elevation(&img).unwrap();
            let got = watershed_flood(&elev, &markers).unwrap();
            assert_eq!(got.bits(), reference_flood(elev.values(), markers.labels(), 8, 8).as_slice(), "seed {seed}");
        }
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..2, h * w).prop_map(move |bits| mask(h, w, &bits))
        })
    }

    proptest! {
        #[test]
        fn polarity_involution(m in arb_mask()) {
            prop_assert_eq!(m.inverted().inverted(), m.clone());
            let bg = m.with_polarity(Polarity::BackgroundOne);
            for (a, b) in m.bits().iter().zip(bg.bits()) {
                prop_assert_eq!(*a, 1 - *b);
            }
        }

        #[test]
        fn opening_closing_idempotent(m in arb_mask()) {
            let o = opening(&m);
            prop_assert_eq!(opening(&o), o);
            let c = closing(&m);
            prop_assert_eq!(closing(&c), c);
        }

        #[test]
        fn dilation_is_extensive(m in arb_mask()) {
            let d = dilate(&m);
            for (a, b) in m.bits().iter().zip(d.bits()) {
                prop_assert!(*a <= *b);
            }
        }

        #[test]
        fn marker_threshold_monotone(v in 0.0f32..1.0, dv in 0.0f32..1.0) {
            let lo = make_markers(&gray(1, 1, vec![v])).labels()[0];
            let hi = make_markers(&gray(1, 1, vec![(v + dv).min(1.0)])).labels()[0];
            prop_assert!(!(lo == FG_LABEL && hi == BG_LABEL));
            let rank = |l: u8| match l { BG_LABEL => 0, UNMARKED => 1, _ => 2 };
            prop_assert!(rank(hi) >= rank(lo));
        }

        #[test]
        fn flood_is_total(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f32> = (0..36).map(|_| rng.random()).collect();
            let img = gray(6, 6, g);
            let markers = make_markers(&img);
            let out = watershed_flood(&sobel_elevation(&img).unwrap(), &markers).unwrap();
            // Marked pixels keep their labels.
            for (b, l) in out.bits().iter().zip(markers.labels()) {
                if *l == FG_LABEL { prop_assert_eq!(*b, 1); }
                if *l == BG_LABEL && markers.count(FG_LABEL) > 0 { prop_assert_eq!(*b, 0); }
            }
        }
    }
}
