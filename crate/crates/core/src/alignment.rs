//! Foreground-masked L2 alignment between RGB and thermal pyramids.

use crate::autograd::Var;
use crate::detector::NUM_LEVELS;
use crate::error::{Error, Result};
use crate::mask_gen::BinaryMask;
use crate::nn::Session;
use crate::tensor::Tensor;

/// Per-level alignment scales, index 0 = largest map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentWeights(pub [f32; NUM_LEVELS]);

impl Default for AlignmentWeights {
    fn default() -> Self {
        Self([1.0, 1.0, 0.5, 0.05, 0.01])
    }
}

impl AlignmentWeights {
    pub fn new(beta: [f32; NUM_LEVELS]) -> Result<Self> {
        if beta.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::Config(format!("alignment scales must be non-negative, got {beta:?}")));
        }
        Ok(Self(beta))
    }
}

/// Mask over `(y, x)` as 0/1 weights, 1 on foreground.
pub(crate) fn fg_weights(mask: &BinaryMask) -> Vec<f32> {
    let (h, w) = mask.dims();
    (0..h * w).map(|i| mask.is_foreground(i / w, i % w) as u8 as f32).collect()
}

fn batch_mask(masks: &[&BinaryMask], n: usize, h: usize, w: usize) -> Result<Vec<f32>> {
    if masks.len() != n {
        return Err(Error::Shape(format!("{} masks for a batch of {n}", masks.len())));
    }
    let mut out = Vec::with_capacity(n * h * w);
    for m in masks {
        if m.dims() != (h, w) {
            return Err(Error::Shape(format!("mask is {:?}, level is {h}x{w}", m.dims())));
        }
        out.extend(fg_weights(m));
    }
    Ok(out)
}

/// Mean of `(rgb - thermal)^2` over foreground pixels and all channels;
/// zero for an empty mask.
pub fn masked_l2(rgb: &Tensor, thermal: &Tensor, masks: &[&BinaryMask]) -> Result<f64> {
    if rgb.shape() != thermal.shape() || rgb.shape().len() != 4 {
        return Err(Error::Shape(format!("{:?} vs {:?}", rgb.shape(), thermal.shape())));
    }
    let (n, c, h, w) = rgb.dims4();
    let m = batch_mask(masks, n, h, w)?;
    let (mut acc, mut count) = (0.0f64, 0usize);
    for b in 0..n {
        for ch in 0..c {
            for p in 0..h * w {
                if m[b * h * w + p] > 0.0 {
                    let i = (b * c + ch) * h * w + p;
                    let d = (rgb.data()[i] - thermal.data()[i]) as f64;
                    acc += d * d;
                    count += 1;
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { acc / count as f64 })
}

/// Graph form of [`masked_l2`].
pub fn masked_l2_var(s: &mut Session, rgb: Var, thermal: Var, masks: &[&BinaryMask]) -> Result<Var> {
    let (n, _, h, w) = s.value(rgb).dims4();
    let m = batch_mask(masks, n, h, w)?;
    s.graph.masked_mse(rgb, thermal, m)
}

pub struct AlignmentOutput {
    pub total: Var,
    pub per_level: Vec<Var>,
}

/// `sum_f beta_f * masked_l2_f`. `masks[f][i]` is the FG mask of sample `i`
/// at level `f`.
pub fn fpn_alignment_loss(
    s: &mut Session,
    pyr_rgb: &[Var],
    pyr_thermal: &[Var],
    masks: &[Vec<BinaryMask>],
    beta: &AlignmentWeights,
) -> Result<AlignmentOutput> {
    if pyr_rgb.len() != NUM_LEVELS || pyr_thermal.len() != NUM_LEVELS || masks.len() != NUM_LEVELS {
        return Err(Error::Shape(format!("alignment needs {NUM_LEVELS} levels of features and masks")));
    }
    let mut per_level = Vec::with_capacity(NUM_LEVELS);
    for f in 0..NUM_LEVELS {
        let refs: Vec<&BinaryMask> = masks[f].iter().collect();
        per_level.push(masked_l2_var(s, pyr_rgb[f], pyr_thermal[f], &refs)?);
    }
    let parts: Vec<(Var, f32)> = per_level.iter().copied().zip(beta.0).collect();
    let total = s.graph.weighted_sum(&parts);
    Ok(AlignmentOutput { total, per_level })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask_gen::Polarity;
    use crate::nn::{frozen, ParamStore};

    fn fg(h: usize, w: usize, bits: Vec<u8>) -> BinaryMask {
        BinaryMask::new(h, w, bits, Polarity::ForegroundOne).unwrap()
    }

    #[test]
    fn hand_example() {
        // 1x2x1 maps: channels (1, 3) vs (0, 1), first pixel row masked.
        let a = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 5.0, 3.0, 5.0]).unwrap();
        let b = Tensor::new(vec![1, 2, 2, 1], vec![0.0, -1.0, 1.0, 9.0]).unwrap();
        let m = fg(2, 1, vec![1, 0]);
        assert!((masked_l2(&a, &b, &[&m]).unwrap() - 2.5).abs() < 1e-12);
        let a = Tensor::new(vec![1, 1, 2, 1], vec![1.0, 3.0]).unwrap();
        let b = Tensor::new(vec![1, 1, 2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(masked_l2(&a, &b, &[&m]).unwrap(), 1.0);
    }

    #[test]
    fn empty_mask_and_identity() {
        let a = Tensor::full(&[1, 3, 2, 2], 1.5);
        let b = Tensor::full(&[1, 3, 2, 2], -1.0);
        assert_eq!(masked_l2(&a, &b, &[&fg(2, 2, vec![0; 4])]).unwrap(), 0.0);
        assert_eq!(masked_l2(&a, &a, &[&fg(2, 2, vec![1; 4])]).unwrap(), 0.0);
        // Background-one masks are read by meaning, not by bit.
        let bg = BinaryMask::new(2, 2, vec![1; 4], Polarity::BackgroundOne).unwrap();
        assert_eq!(masked_l2(&a, &b, &[&bg]).unwrap(), 0.0);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let a = Tensor::zeros(&[1, 1, 2, 2]);
        let b = Tensor::zeros(&[1, 1, 2, 3]);
        assert!(masked_l2(&a, &b, &[&fg(2, 2, vec![1; 4])]).is_err());
        assert!(masked_l2(&a, &a, &[&fg(3, 2, vec![1; 6])]).is_err());
    }

    #[test]
    fn weighted_levels() {
        let store = ParamStore::new();
        let mut s = Session::new(&store, &frozen);
        let l2 = [0.4f32, 0.0, 0.2, 0.0, 0.0];
        let mut rgb = Vec::new();
        let mut th = Vec::new();
        let mut masks = Vec::new();
        for v in l2 {
            rgb.push(s.input(Tensor::full(&[1, 1, 1, 1], v.sqrt())));
            th.push(s.input(Tensor::zeros(&[1, 1, 1, 1])));
            masks.push(vec![fg(1, 1, vec![1])]);
        }
        let out = fpn_alignment_loss(&mut s, &rgb, &th, &masks, &AlignmentWeights::default()).unwrap();
        assert!((s.value(out.total).item() - 0.5).abs() < 1e-6);
        assert!(AlignmentWeights::new([1.0, -1.0, 0.0, 0.0, 0.0]).is_err());
    }
}
