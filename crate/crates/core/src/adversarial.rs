//! Gradient reversal, domain discriminators and the focal domain loss.
//!
//! Label convention: RGB (source) = 0, thermal (target) = 1. A
//! discriminator's sigmoid output is the probability that its input map came
//! from the thermal branch.

use rand::{Rng, SeedableRng};

use crate::autograd::{focal_term, sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::mask_gen::BinaryMask;
use crate::nn::{dropout_mask, update_running_stats, BatchNorm, Conv, Linear, ParamStore, Session};
use crate::tensor::Tensor;

/// Extractor levels the discriminators attach to.
pub const DISC_LEVELS: [usize; 3] = [3, 4, 5];
pub const DROPOUT_P: f32 = 0.5;
pub const PROB_EPS: f32 = 1e-7;
pub const DISC_WIDTHS: [usize; 3] = [64, 32, 16];

/// Adaptation factor for the reversal layer at `iteration` of `total`:
/// `2 / (1 + exp(-10 p)) - 1` with `p = iteration / total`.
pub fn grl_schedule(iteration: usize, total: usize) -> f32 {
    let p = if total == 0 { 1.0 } else { (iteration.min(total) as f64) / total as f64 };
    (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0) as f32
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrlState {
    pub progress: f32,
    pub lambda: f32,
}

impl GrlState {
    pub fn at(iteration: usize, total: usize) -> Self {
        let progress = if total == 0 { 1.0 } else { iteration.min(total) as f32 / total as f32 };
        Self { progress, lambda: grl_schedule(iteration, total) }
    }
}

/// Identity forward, `-lambda`-scaled gradient backward.
pub fn grl(g: &mut Graph, x: Var, lambda: f32) -> Var {
    g.grl(x, lambda)
}

/// Mean single-class focal loss `-(1 - p_t)^gamma ln p_t` where `p_t` is the
/// probability assigned to the true domain.
pub fn domain_focal_loss(p_target: &[f64], is_thermal: &[bool], gamma: f64) -> f64 {
    assert_eq!(p_target.len(), is_thermal.len());
    if p_target.is_empty() {
        return 0.0;
    }
    let total: f64 = p_target
        .iter()
        .zip(is_thermal)
        .map(|(&p, &t)| {
            let eps = 1e-7f64;
            let p = p.clamp(eps, 1.0 - eps);
            let pt = if t { p } else { 1.0 - p };
            focal_term(pt, gamma)
        })
        .sum();
    total / p_target.len() as f64
}

/// Three conv-BN-ReLU-dropout blocks, then either pooling and a linear logit
/// or (pixel-wise variant) a 1x1 logit map.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub level: usize,
    pub in_channels: usize,
    pub pixelwise: bool,
}

pub struct DiscriminatorOutput {
    /// `[N, 1]` for pooled discriminators, `[N, 1, H, W]` for pixel-wise.
    pub logits: Var,
    pub bn_nodes: Vec<(BatchNorm, Var)>,
}

impl Discriminator {
    pub fn new(level: usize, in_channels: usize, pixelwise: bool) -> Self {
        Self { level, in_channels, pixelwise }
    }

    fn prefix(&self) -> String {
        format!("disc{}", self.level)
    }

    fn blocks(&self) -> Vec<(Conv, BatchNorm)> {
        let mut cin = self.in_channels;
        DISC_WIDTHS
            .iter()
            .enumerate()
            .map(|(j, &cout)| {
                let conv = Conv::new(format!("{}.b{j}.conv", self.prefix()), cin, cout, 3, 1);
                let bn = BatchNorm { name: format!("{}.b{j}.bn", self.prefix()), channels: cout };
                cin = cout;
                (conv, bn)
            })
            .collect()
    }

    fn fc(&self) -> Linear {
        Linear { name: format!("{}.fc", self.prefix()), fin: DISC_WIDTHS[2], fout: 1 }
    }

    fn pixel_out(&self) -> Conv {
        Conv::new(format!("{}.px", self.prefix()), DISC_WIDTHS[2], 1, 1, 1)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for (conv, bn) in self.blocks() {
            conv.init(store, rng);
            bn.init(store);
        }
        if self.pixelwise {
            self.pixel_out().init_scaled(store, rng, 0.01);
        } else {
            self.fc().init(store, rng);
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, training: bool, rng: &mut impl Rng) -> Result<DiscriminatorOutput> {
        let c = s.value(x).shape()[1];
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "discriminator {} expects {} channels, got {c}",
                self.level, self.in_channels
            )));
        }
        let mut h = x;
        let mut bn_nodes = Vec::new();
        for (conv, bn) in self.blocks() {
            h = conv.forward(s, h)?;
            h = bn.forward(s, h, training)?;
            if training {
                bn_nodes.push((bn.clone(), h));
            }
            h = s.graph.relu(h);
            if training {
                let mask = dropout_mask(s.value(h).len(), DROPOUT_P, rng);
                h = s.graph.mul_mask(h, mask)?;
            }
        }
        let logits = if self.pixelwise {
            self.pixel_out().forward(s, h)?
        } else {
            let pooled = s.graph.global_avg_pool(h);
            self.fc().forward(s, pooled)?
        };
        Ok(DiscriminatorOutput { logits, bn_nodes })
    }

    /// Evaluation-mode probability that each map in the batch is thermal.
    pub fn predict(&self, store: &ParamStore, features: &Tensor) -> Result<Vec<f32>> {
        let mut s = Session::new(store, &crate::nn::frozen);
        let x = s.input(features.clone());
        // Dropout is inactive outside training, so the generator is never drawn from.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut s, x, false, &mut rng)?;
        let z = s.value(out.logits);
        let n = z.shape()[0];
        let per = z.len() / n;
        Ok(z.data().chunks(per).map(|c| sigmoid(c.iter().sum::<f32>() / per as f32)).collect())
    }
}

/// The three discriminators for given C3/C4/C5 channel counts.
#[derive(Clone, Debug)]
pub struct Discriminators {
    pub discs: Vec<Discriminator>,
}

impl Discriminators {
    pub fn new(level_channels: [usize; 3], pixelwise: bool) -> Self {
        Self {
            discs: DISC_LEVELS
                .iter()
                .zip(level_channels)
                .map(|(&l, c)| Discriminator::new(l, c, pixelwise))
                .collect(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for d in &self.discs {
            d.init(store, rng);
        }
    }

    pub fn is_param(name: &str) -> bool {
        name.starts_with("disc")
    }
}

pub struct AdversarialOutput {
    /// `L_D3 + L_D4 + L_D5`.
    pub total: Var,
    pub per_level: [Var; 3],
    pub bn_nodes: Vec<(BatchNorm, Var)>,
    pub batch: usize,
}

/// Sum over levels of the mean focal domain loss, with both domains' maps
/// passed through a reversal layer into each discriminator.
///
/// For pixel-wise discriminators `fg_masks[level][sample]` restricts the loss
/// to foreground pixels; it is ignored otherwise.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_loss(
    s: &mut Session,
    rgb_levels: [Var; 3],
    thermal_levels: [Var; 3],
    discs: &Discriminators,
    lambda: f32,
    gamma: f32,
    fg_masks: Option<&[Vec<BinaryMask>; 3]>,
    rng: &mut impl Rng,
) -> Result<AdversarialOutput> {
    let mut per_level = Vec::with_capacity(3);
    let mut bn_nodes = Vec::new();
    let mut batch = 0;
    for (i, d) in discs.discs.iter().enumerate() {
        let r = grl(&mut s.graph, rgb_levels[i], lambda);
        let t = grl(&mut s.graph, thermal_levels[i], lambda);
        let nr = s.value(r).shape()[0];
        let nt = s.value(t).shape()[0];
        batch = nr;
        // One batch so normalization statistics mix both domains.
        let both = s.graph.concat(&[r, t])?;
        let out = d.forward(s, both, true, rng)?;
        bn_nodes.extend(out.bn_nodes);
        let z = s.value(out.logits);
        let per = z.len() / (nr + nt);
        let mut labels = vec![0.0f32; nr * per];
        labels.extend(std::iter::repeat_n(1.0f32, nt * per));
        let weights = if d.pixelwise {
            let masks = fg_masks.ok_or_else(|| Error::InvalidInput("pixel-wise discriminators need FG masks".into()))?;
            let level = &masks[i];
            if level.len() != nr || nr != nt {
                return Err(Error::Shape("one FG mask per pair is required".into()));
            }
            let mut w = Vec::with_capacity(z.len());
            for _ in 0..2 {
                for m in level {
                    if m.bits().len() != per {
                        return Err(Error::Shape(format!("mask {:?} vs logit map of {per}", m.dims())));
                    }
                    let (mh, mw) = m.dims();
                    w.extend((0..mh * mw).map(|i| m.is_foreground(i / mw, i % mw) as u8 as f32));
                }
            }
            w
        } else {
            vec![1.0; z.len()]
        };
        per_level.push(s.graph.domain_focal(out.logits, labels, weights, gamma, PROB_EPS)?);
    }
    let total = s.graph.weighted_sum(&[(per_level[0], 1.0), (per_level[1], 1.0), (per_level[2], 1.0)]);
    Ok(AdversarialOutput { total, per_level: [per_level[0], per_level[1], per_level[2]], bn_nodes, batch })
}

/// Folds batch statistics from a training pass into the running buffers.
pub fn update_discriminator_stats(store: &mut ParamStore, s: &Session, out: &AdversarialOutput) -> Result<()> {
    for (bn, node) in &out.bn_nodes {
        if let Some(stats) = s.graph.batch_stats(*node) {
            let (_, _, h, w) = s.value(*node).dims4();
            let count = s.value(*node).shape()[0] * h * w;
            update_running_stats(store, bn, stats, count)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_values() {
        assert_eq!(grl_schedule(0, 100), 0.0);
        assert!((grl_schedule(100, 100) - 0.999_909_2).abs() < 1e-6);
        assert!((grl_schedule(50, 100) - 0.986_614_3).abs() < 1e-6);
        let mut last = -1.0;
        for i in 0..=100 {
            let l = grl_schedule(i, 100);
            assert!(l >= last);
            last = l;
        }
    }

    #[test]
    fn focal_closed_form() {
        assert_eq!(domain_focal_loss(&[1.0], &[true], 2.0), focal_term(1.0 - 1e-7, 2.0));
        assert!((domain_focal_loss(&[0.5], &[true], 2.0) - 0.25 * 2f64.ln()).abs() < 1e-9);
        assert!((domain_focal_loss(&[0.1], &[false], 2.0) - 0.01 * -(0.9f64.ln())).abs() < 1e-8);
    }

    #[test]
    fn untrained_half_probability_loss() {
        // Zero final layer: every discriminator outputs exactly 0.5.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let discs = Discriminators::new([4, 4, 4], false);
        let mut store = ParamStore::new();
        discs.init(&mut store, &mut rng);
        for l in DISC_LEVELS {
            store.get_mut(&format!("disc{l}.fc.w")).unwrap().data_mut().fill(0.0);
        }
        let trainable = |n: &str| n.starts_with("disc");
        let mut s = Session::new(&store, &trainable);
        let lv = |s: &mut Session, v: f32| [8usize, 4, 2].map(|d| s.input(Tensor::full(&[2, 4, d, d], v)));
        let r = lv(&mut s, 0.1);
        let t = lv(&mut s, 0.9);
        let out = adversarial_loss(&mut s, r, t, &discs, 1.0, 2.0, None, &mut rng).unwrap();
        let want = 3.0 * 0.25 * 2f64.ln();
        assert!((s.value(out.total).item() as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Discriminator::new(3, 8, false);
        let mut store = ParamStore::new();
        d.init(&mut store, &mut rng);
        assert!(d.predict(&store, &Tensor::zeros(&[1, 4, 4, 4])).is_err());
        let p = d.predict(&store, &Tensor::full(&[2, 8, 4, 4], 3.0)).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_lambda_blocks_extractor_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let discs = Discriminators::new([2, 2, 2], false);
        let mut store = ParamStore::new();
        discs.init(&mut store, &mut rng);
        store.insert("x3", Tensor::full(&[2, 2, 4, 4], 0.3));
        store.insert("x4", Tensor::full(&[2, 2, 2, 2], 0.3));
        store.insert("x5", Tensor::full(&[2, 2, 1, 1], 0.3));
        let trainable = |_: &str| true;
        let mut s = Session::new(&store, &trainable);
        let t = [s.p("x3").unwrap(), s.p("x4").unwrap(), s.p("x5").unwrap()];
        let r = [4usize, 2, 1].map(|d| s.input(Tensor::full(&[2, 2, d, d], -0.2)));
        let out = adversarial_loss(&mut s, r, t, &discs, 0.0, 2.0, None, &mut rng).unwrap();
        let mut g = s.graph.backward(out.total).unwrap();
        let named = s.named_grads(&mut g);
        for k in ["x3", "x4", "x5"] {
            assert!(named[k].data().iter().all(|&v| v == 0.0));
        }
        assert!(named["disc3.fc.w"].sq_norm() > 0.0);
    }
}
