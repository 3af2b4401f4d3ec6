//! Supervised pretraining of the RGB branch and shared heads on annotated
//! RGB images, standing in for a detector pretrained on RGB imagery.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{encode, AnchorGrid, Branch, Detector};
use crate::error::{Error, Result};
use crate::evaluation::GroundTruthBox;
use crate::image::Image;
use crate::nn::{ParamStore, Session};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const POSITIVE_IOU: f32 = 0.5;
pub const NEGATIVE_IOU: f32 = 0.4;
/// Anchors overlapping a shadowed crown this much are left out of the loss.
pub const DIFFICULT_IGNORE_IOU: f32 = 0.3;
pub const FOCAL_ALPHA: f32 = 0.25;
pub const FOCAL_GAMMA: f32 = 2.0;
pub const SMOOTH_L1_BETA: f32 = 1.0 / 9.0;

/// Per-level training targets in head-output layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    /// `[A * H * W]`: 1 positive, 0 negative, -1 ignored.
    pub cls: Vec<f32>,
    /// `[4A * H * W]` regression targets and 0/1 weights.
    pub reg: Vec<f32>,
    pub reg_weight: Vec<f32>,
}

/// Labels every anchor against the visible boxes; anchors overlapping only
/// shadowed boxes are ignored rather than treated as background.
pub fn assign_targets(anchors: &AnchorGrid, gts: &[GroundTruthBox]) -> (Vec<LevelTargets>, usize) {
    let visible: Vec<_> = gts.iter().filter(|g| !g.difficult).map(|g| g.bbox).collect();
    let difficult: Vec<_> = gts.iter().filter(|g| g.difficult).map(|g| g.bbox).collect();
    let mut out = Vec::with_capacity(anchors.num_levels());
    // Best anchor per visible GT across all levels: (iou, level, index).
    let mut best: Vec<(f32, usize, usize)> = vec![(0.0, 0, 0); visible.len()];
    let mut argmax: Vec<Vec<(f32, usize)>> = Vec::new();
    for lvl in 0..anchors.num_levels() {
        let list = anchors.level(lvl);
        let mut per = Vec::with_capacity(list.len());
        for (i, a) in list.iter().enumerate() {
            let ab = a.bbox();
            let mut m = (0.0f32, usize::MAX);
            for (j, g) in visible.iter().enumerate() {
                let v = ab.iou(g);
                if v > m.0 {
                    m = (v, j);
                }
                if v > best[j].0 {
                    best[j] = (v, lvl, i);
                }
            }
            per.push(m);
        }
        argmax.push(per);
    }
    let mut positives = 0;
    for (lvl, per) in argmax.iter_mut().enumerate() {
        for (j, &(v, l, i)) in best.iter().enumerate() {
            if v > 0.0 && l == lvl {
                per[i] = (POSITIVE_IOU.max(per[i].0), j);
            }
        }
        let list = anchors.level(lvl);
        let (h, w) = anchors.level_dims(lvl);
        let hw = h * w;
        let mut t = LevelTargets { cls: vec![0.0; list.len()], reg: vec![0.0; list.len() * 4], reg_weight: vec![0.0; list.len() * 4] };
        for (i, a) in list.iter().enumerate() {
            let (v, j) = per[i];
            let (ai, pos) = (i / hw, i % hw);
            if v >= POSITIVE_IOU {
                t.cls[i] = 1.0;
                positives += 1;
                let d = encode(a, &visible[j]);
                for k in 0..4 {
                    t.reg[(ai * 4 + k) * hw + pos] = d[k];
                    t.reg_weight[(ai * 4 + k) * hw + pos] = 1.0;
                }
            } else if v >= NEGATIVE_IOU || difficult.iter().any(|d| a.bbox().iou(d) >= DIFFICULT_IGNORE_IOU) {
                t.cls[i] = -1.0;
            }
        }
        out.push(t);
    }
    (out, positives)
}

#[derive(Clone, Debug)]
pub struct SourceSample {
    pub rgb: Tensor,
    pub targets: Vec<LevelTargets>,
    pub positives: usize,
}

pub fn prepare_source(detector: &Detector, images: &[(Image, Vec<GroundTruthBox>)]) -> Result<Vec<SourceSample>> {
    images
        .iter()
        .map(|(img, gts)| {
            if img.channels() != 3 {
                return Err(Error::InvalidInput("source images must be RGB".into()));
            }
            let anchors = detector.anchors(img.height(), img.width());
            let (targets, positives) = assign_targets(&anchors, gts);
            Ok(SourceSample { rgb: img.to_tensor(), targets, positives })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceLoss {
    pub cls: f32,
    pub reg: f32,
}

fn trainable_source(name: &str) -> bool {
    name.starts_with("rgb.") || name.starts_with("head.")
}

/// One supervised step on the RGB branch and heads.
pub fn source_step(detector: &Detector, store: &mut ParamStore, adam: &mut Adam, batch: &[&SourceSample], lr: f32) -> Result<SourceLoss> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut s = Session::new(store, &trainable_source);
    let x = Tensor::stack(&batch.iter().map(|b| &b.rgb).collect::<Vec<_>>())?;
    let xv = s.input(x);
    let (_, pyr) = detector.branch_forward(&mut s, Branch::Rgb, xv)?;
    let outs = detector.heads(&mut s, &pyr)?;
    let norm = batch.iter().map(|b| b.positives).sum::<usize>().max(1) as f32;
    let mut cls_parts = Vec::new();
    let mut reg_parts = Vec::new();
    for (lvl, &(c, r)) in outs.iter().enumerate() {
        let cat = |f: &dyn Fn(&LevelTargets) -> &Vec<f32>| batch.iter().flat_map(|b| f(&b.targets[lvl]).iter().copied()).collect::<Vec<f32>>();
        cls_parts.push((s.graph.sigmoid_focal(c, cat(&|t| &t.cls), FOCAL_ALPHA, FOCAL_GAMMA, norm)?, 1.0));
        reg_parts.push((s.graph.smooth_l1(r, cat(&|t| &t.reg), cat(&|t| &t.reg_weight), SMOOTH_L1_BETA, norm)?, 1.0));
    }
    let cls = s.graph.weighted_sum(&cls_parts);
    let reg = s.graph.weighted_sum(&reg_parts);
    let total = s.graph.weighted_sum(&[(cls, 1.0), (reg, 1.0)]);
    let loss = SourceLoss { cls: s.value(cls).item(), reg: s.value(reg).item() };
    if !(loss.cls.is_finite() && loss.reg.is_finite()) {
        return Err(Error::NonFiniteLoss { iteration: adam.step as usize, which: "source detection loss".into() });
    }
    let mut g = s.graph.backward(total)?;
    let grads = s.named_grads(&mut g);
    drop(s);
    adam.step(store, &grads, lr)?;
    Ok(loss)
}

/// Pretrains the RGB branch and heads, then resets the thermal branch to a
/// copy of the result. Returns the per-step losses.
pub fn pretrain_source(
    detector: &Detector,
    store: &mut ParamStore,
    samples: &[SourceSample],
    iterations: usize,
    batch_size: usize,
    lr: f32,
    seed: u64,
) -> Result<Vec<SourceLoss>> {
    if samples.is_empty() && iterations > 0 {
        return Err(Error::InvalidInput("no source samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size.min(samples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        // Step decay for the final fifth.
        let step_lr = if it * 5 >= iterations * 4 { lr * 0.1 } else { lr };
        let l = source_step(detector, store, &mut adam, &batch, step_lr)?;
        if it % 100 == 0 {
            log::info!("source step {it}: cls {:.4} reg {:.4}", l.cls, l.reg);
        }
        log.push(l);
    }
    detector.sync_thermal_from_rgb(store);
    Ok(log)
}
