//! Inference-time fusion of background pyramid features.
//!
//! At background pixels the RGB and thermal maps are averaged with weight
//! `lambda_t * eta_f` on the thermal side; foreground pixels keep the RGB
//! value untouched. The fused pyramid replaces the RGB one in front of the
//! shared heads.

use crate::detector::{Branch, Detection, Detector, FeaturePyramid, PostprocessConfig, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::image::ImagePair;
use crate::mask_gen::{generate_mask, resize_to_levels, BinaryMask, Polarity};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeights {
    pub lambda_t: f32,
    /// Per-level scaling, index 0 = largest map.
    pub eta: [f32; NUM_LEVELS],
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { lambda_t: 5.0, eta: [1.0, 1.0, 0.5, 0.2, 0.2] }
    }
}

impl FusionWeights {
    pub fn new(lambda_t: f32, eta: [f32; NUM_LEVELS]) -> Result<Self> {
        if !(lambda_t.is_finite() && lambda_t >= 0.0) || eta.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::Config(format!("fusion weights must be non-negative (lambda_t {lambda_t}, eta {eta:?})")));
        }
        Ok(Self { lambda_t, eta })
    }

    /// Whether every level weights thermal at least as much as RGB.
    pub fn thermal_dominant(&self) -> bool {
        self.eta.iter().all(|e| self.lambda_t * e >= 1.0 - 1e-6)
    }

    pub fn level_weight(&self, level: usize) -> f32 {
        self.lambda_t * self.eta[level]
    }
}

/// Fuses one level. `bg[i]` is the mask of sample `i` at this level's dims.
pub fn fuse_level(rgb: &Tensor, thermal: &Tensor, bg: &[&BinaryMask], weight: f32) -> Result<Tensor> {
    if rgb.shape() != thermal.shape() || rgb.shape().len() != 4 {
        return Err(Error::Shape(format!("{:?} vs {:?}", rgb.shape(), thermal.shape())));
    }
    let (n, c, h, w) = rgb.dims4();
    if bg.len() != n {
        return Err(Error::Shape(format!("{} masks for a batch of {n}", bg.len())));
    }
    let mut out = rgb.clone();
    let denom = 1.0 + weight;
    for (b, mask) in bg.iter().enumerate() {
        if mask.dims() != (h, w) {
            return Err(Error::Shape(format!("mask is {:?}, level is {h}x{w}", mask.dims())));
        }
        for y in 0..h {
            for x in 0..w {
                if mask.is_foreground(y, x) {
                    continue;
                }
                for ch in 0..c {
                    let i = ((b * c + ch) * h + y) * w + x;
                    let (r, t) = (rgb.data()[i], thermal.data()[i]);
                    out.data_mut()[i] = (r + t * weight) / denom;
                }
            }
        }
    }
    Ok(out)
}

/// Level-wise fusion; `bg_masks[f]` holds one mask per sample.
pub fn fuse_pyramid(rgb: &FeaturePyramid, thermal: &FeaturePyramid, bg_masks: &[Vec<BinaryMask>], weights: &FusionWeights) -> Result<FeaturePyramid> {
    if bg_masks.len() != NUM_LEVELS {
        return Err(Error::Shape(format!("{} mask levels, expected {NUM_LEVELS}", bg_masks.len())));
    }
    let levels = (0..NUM_LEVELS)
        .map(|f| {
            let refs: Vec<&BinaryMask> = bg_masks[f].iter().collect();
            fuse_level(&rgb.levels[f], &thermal.levels[f], &refs, weights.level_weight(f))
        })
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramid::new(levels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceMode {
    RgbOnly,
    ThermalOnly,
    Fused,
}

impl InferenceMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rgb_only" | "rgb" => Ok(Self::RgbOnly),
            "thermal_only" | "thermal" => Ok(Self::ThermalOnly),
            "fused" => Ok(Self::Fused),
            other => Err(Error::Config(format!("unknown mode `{other}` (rgb_only, thermal_only, fused)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::RgbOnly => "rgb_only",
            Self::ThermalOnly => "thermal_only",
            Self::Fused => "fused",
        }
    }
}

/// Everything inference needs besides the parameters.
#[derive(Clone, Debug)]
pub struct InferenceSetup {
    pub detector: Detector,
    pub fusion: FusionWeights,
    pub post: PostprocessConfig,
}

pub struct PairInference {
    pub detections: Vec<Detection>,
    /// Refined full-resolution background mask of the RGB image.
    pub bg_mask: BinaryMask,
}

/// Runs one pair through the requested path.
pub fn infer_pair(setup: &InferenceSetup, store: &ParamStore, pair: &ImagePair, mode: InferenceMode) -> Result<PairInference> {
    let dims = pair.dims();
    setup.detector.cfg.check_input(dims.0, dims.1)?;
    let bg_mask = generate_mask(&pair.rgb, Polarity::BackgroundOne)?;
    let pyramid = match mode {
        InferenceMode::RgbOnly => setup.detector.extract_image(store, Branch::Rgb, &pair.rgb)?.1,
        InferenceMode::ThermalOnly => setup.detector.extract_image(store, Branch::Thermal, &pair.thermal)?.1,
        InferenceMode::Fused => {
            let (_, rgb) = setup.detector.extract_image(store, Branch::Rgb, &pair.rgb)?;
            let (_, thermal) = setup.detector.extract_image(store, Branch::Thermal, &pair.thermal)?;
            let masks = resize_to_levels(&bg_mask, &rgb.dims(), Polarity::BackgroundOne)?;
            let per_level: Vec<Vec<BinaryMask>> = masks.into_iter().map(|m| vec![m]).collect();
            fuse_pyramid(&rgb, &thermal, &per_level, &setup.fusion)?
        }
    };
    let detections = setup.detector.detect(store, &pyramid, dims, &setup.post)?;
    Ok(PairInference { detections, bg_mask })
}

/// Fused detections for one registered pair.
pub fn infer_fused(setup: &InferenceSetup, store: &ParamStore, pair: &ImagePair) -> Result<Vec<Detection>> {
    Ok(infer_pair(setup, store, pair, InferenceMode::Fused)?.detections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bg(h: usize, w: usize, bits: Vec<u8>) -> BinaryMask {
        BinaryMask::new(h, w, bits, Polarity::BackgroundOne).unwrap()
    }

    #[test]
    fn weighted_background_pixel() {
        let r = Tensor::full(&[1, 1, 1, 2], 2.0);
        let t = Tensor::full(&[1, 1, 1, 2], 8.0);
        let out = fuse_level(&r, &t, &[&bg(1, 2, vec![1, 0])], 5.0).unwrap();
        assert_eq!(out.data(), &[7.0, 2.0]);
        let mean = fuse_level(&r, &t, &[&bg(1, 2, vec![1, 1])], 1.0).unwrap();
        assert_eq!(mean.data(), &[5.0, 5.0]);
    }

    #[test]
    fn defaults_are_thermal_dominant() {
        assert!(FusionWeights::default().thermal_dominant());
        assert!(!FusionWeights { lambda_t: 4.0, ..Default::default() }.thermal_dominant());
        assert!(FusionWeights::new(-1.0, [1.0; 5]).is_err());
    }

    #[test]
    fn dim_mismatch_rejected() {
        let r = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(fuse_level(&r, &Tensor::zeros(&[1, 1, 2, 1]), &[&bg(2, 2, vec![1; 4])], 1.0).is_err());
        assert!(fuse_level(&r, &r, &[&bg(1, 2, vec![1; 2])], 1.0).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [InferenceMode::RgbOnly, InferenceMode::ThermalOnly, InferenceMode::Fused] {
            assert_eq!(InferenceMode::parse(m.as_str()).unwrap(), m);
        }
        assert!(InferenceMode::parse("early").is_err());
    }

    proptest! {
        #[test]
        fn convex_and_foreground_preserving(
            vals in proptest::collection::vec((-50.0f32..50.0, -50.0f32..50.0, 0u8..2), 12),
            weight in 0.0f32..20.0,
        ) {
            let r = Tensor::new(vec![1, 3, 2, 2], vals.iter().map(|v| v.0).collect()).unwrap();
            let t = Tensor::new(vec![1, 3, 2, 2], vals.iter().map(|v| v.1).collect()).unwrap();
            let m = bg(2, 2, vals[..4].iter().map(|v| v.2).collect());
            let out = fuse_level(&r, &t, &[&m], weight).unwrap();
            for i in 0..12 {
                let p = i % 4;
                let (a, b, o) = (r.data()[i], t.data()[i], out.data()[i]);
                if m.is_foreground(p / 2, p % 2) {
                    prop_assert_eq!(o.to_bits(), a.to_bits());
                } else {
                    let (lo, hi) = (a.min(b), a.max(b));
                    prop_assert!(o >= lo - 1e-4 && o <= hi + 1e-4);
                    let more = fuse_level(&r, &t, &[&m], weight + 1.0).unwrap().data()[i];
                    prop_assert!((more - b).abs() <= (o - b).abs() + 1e-4);
                }
            }
        }
    }
}
