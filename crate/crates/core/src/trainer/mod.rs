//! Self-supervised adaptation of the thermal branch.
//!
//! Each step runs the thermal branch on a batch of thermal images and
//! compares it against cached outputs of the frozen RGB branch on the paired
//! RGB images: a foreground-masked pyramid alignment loss plus (unless
//! disabled) the adversarial domain loss on extractor levels C3-C5. Only the
//! thermal branch (pre-layer, extractor, pyramid) and the discriminators are
//! trainable; the RGB branch and the shared heads never receive gradients.

pub mod checkpoint;
mod config;
pub mod masks;
pub mod source;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{import_params, CheckpointBundle};
pub use config::{lr_schedule, AlignmentNormalization, TrainConfig};
pub use masks::{MaskCache, MaskSource};
pub use source::SourceLoss;

use crate::adversarial::{adversarial_loss, Discriminators, GrlState};
use crate::alignment::{fpn_alignment_loss, AlignmentWeights};
use crate::detector::{Branch, Detector, ExtractorLevels, FeaturePyramid, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::fusion::InferenceSetup;
use crate::evaluation::GroundTruthBox;
use crate::image::{Image, ImagePair};
use crate::io::write_text;
use crate::mask_gen::{resize_to_levels, BinaryMask, Polarity};
use crate::nn::{BatchNorm, ParamStore, Session};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Detector, discriminators and every parameter they use.
#[derive(Clone, Debug)]
pub struct Model {
    pub detector: Detector,
    pub discs: Discriminators,
    pub store: ParamStore,
}

impl Model {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let detector = Detector::new(cfg.detector.clone());
        let mut store = detector.init(&mut rng);
        let discs = Self::discriminators(cfg);
        discs.init(&mut store, &mut rng);
        Self { detector, discs, store }
    }

    fn discriminators(cfg: &TrainConfig) -> Discriminators {
        let w = cfg.detector.widths;
        Discriminators::new([w[1], w[2], w[3]], cfg.pixelwise_dat)
    }

    /// Rebuilds a model from checkpointed parameters. Missing discriminator
    /// parameters (e.g. from a source-only checkpoint) are freshly initialised.
    pub fn from_params(cfg: &TrainConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(cfg, cfg.seed);
        let mut store = params;
        for (name, t) in fresh.store.iter() {
            match store.get(name) {
                Ok(existing) if existing.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "`{name}` has shape {:?}, config expects {:?}",
                        existing.shape(),
                        t.shape()
                    )));
                }
                Ok(_) => {}
                Err(_) if Discriminators::is_param(name) => store.insert(name.clone(), t.clone()),
                Err(_) => return Err(Error::Checkpoint(format!("checkpoint lacks `{name}`"))),
            }
        }
        Ok(Self { detector: fresh.detector, discs: fresh.discs, store })
    }

    pub fn inference_setup(&self, cfg: &TrainConfig) -> InferenceSetup {
        InferenceSetup { detector: self.detector.clone(), fusion: cfg.fusion, post: cfg.post.clone() }
    }

    pub fn bundle(&self, adam: &Adam, iteration: usize, cfg: &TrainConfig) -> CheckpointBundle {
        CheckpointBundle { params: self.store.clone(), adam: adam.clone(), iteration, config: cfg.to_map() }
    }
}

/// Source pretraining of the RGB branch and heads with the `pretrain_*`
/// settings; the thermal branch is reset to a copy of the result.
pub fn pretrain(model: &mut Model, cfg: &TrainConfig, data: &[(Image, Vec<GroundTruthBox>)]) -> Result<Vec<SourceLoss>> {
    let samples = source::prepare_source(&model.detector, data)?;
    source::pretrain_source(
        &model.detector,
        &mut model.store,
        &samples,
        cfg.pretrain_iterations,
        cfg.pretrain_batch_size,
        cfg.pretrain_lr,
        cfg.seed,
    )
}

pub fn format_source_log(log: &[SourceLoss]) -> String {
    let mut s = String::from("iteration,cls,reg\n");
    for (i, l) in log.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{}", l.cls, l.reg);
    }
    s
}

/// Parameters the adaptation step may update.
pub fn is_adapted_param(name: &str) -> bool {
    name.starts_with("thermal.") || Discriminators::is_param(name)
}

/// Coarse parameter partition used for gradient audits.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("rgb.") {
        "rgb_branch"
    } else if name.starts_with("head.") {
        "heads"
    } else if name.starts_with("thermal.pre.") {
        "thermal_pre_layer"
    } else if name.starts_with("thermal.bb.") {
        "thermal_extractor"
    } else if name.starts_with("thermal.fpn.") {
        "thermal_pyramid"
    } else if Discriminators::is_param(name) {
        "discriminators"
    } else {
        "other"
    }
}

pub const PARAM_GROUPS: [&str; 6] =
    ["rgb_branch", "heads", "thermal_pre_layer", "thermal_extractor", "thermal_pyramid", "discriminators"];

/// A pair with everything the step needs precomputed: the thermal input,
/// the frozen RGB branch outputs and the foreground masks.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub id: String,
    pub thermal: Tensor,
    pub rgb_levels: ExtractorLevels,
    pub rgb_pyramid: FeaturePyramid,
    /// FG-one masks at the five pyramid dims.
    pub fg_masks: Vec<BinaryMask>,
    /// FG-one masks at the C3-C5 dims (pixel-wise discriminators).
    pub extractor_masks: Vec<BinaryMask>,
}

/// Runs the frozen RGB branch once per pair and builds training masks.
pub fn prepare_pairs(model: &Model, cfg: &TrainConfig, pairs: &[(String, ImagePair)], cache: &MaskCache) -> Result<Vec<TrainingPair>> {
    let source = if cfg.no_fg_mask {
        MaskSource::AllForeground
    } else if cfg.detector_pred_mask {
        MaskSource::DetectorBoxes
    } else {
        MaskSource::Watershed
    };
    let mut out = Vec::with_capacity(pairs.len());
    for (id, pair) in pairs {
        let wrap = |e: Error| Error::Pair { pair_id: id.clone(), message: e.to_string() };
        let (h, w) = pair.dims();
        model.detector.cfg.check_input(h, w).map_err(wrap)?;
        let (rgb_levels, rgb_pyramid) = model.detector.extract_image(&model.store, Branch::Rgb, &pair.rgb).map_err(wrap)?;
        let full = match source {
            MaskSource::Watershed => cache.watershed(&pair.rgb).map_err(wrap)?,
            MaskSource::AllForeground => BinaryMask::filled(h, w, 1, Polarity::ForegroundOne),
            MaskSource::DetectorBoxes => {
                let dets = model.detector.detect(&model.store, &rgb_pyramid, (h, w), &cfg.post).map_err(wrap)?;
                masks::boxes_to_mask(&dets, h, w)
            }
        };
        let fg_masks = resize_to_levels(&full, &rgb_pyramid.dims(), Polarity::ForegroundOne)?;
        let ext_dims: Vec<(usize, usize)> = rgb_levels.levels().iter().map(|t| (t.shape()[2], t.shape()[3])).collect();
        let extractor_masks = resize_to_levels(&full, &ext_dims, Polarity::ForegroundOne)?;
        out.push(TrainingPair {
            id: id.clone(),
            thermal: pair.thermal.to_tensor(),
            rgb_levels,
            rgb_pyramid,
            fg_masks,
            extractor_masks,
        });
    }
    Ok(out)
}

/// Scalars from one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub l_d: [f32; 3],
    pub l_fpn: f32,
    pub total: f32,
    /// Squared-gradient norm per parameter group (zero for groups the loss
    /// never reaches).
    pub grad_norms: BTreeMap<&'static str, f64>,
}

fn stack<'a>(items: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    Tensor::stack(&items.collect::<Vec<_>>())
}

/// One Adam step on alignment plus adversarial loss for `batch`.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&TrainingPair],
    grl: GrlState,
    cfg: &TrainConfig,
    lr: f32,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    let no_dat = cfg.no_dat;
    let trainable = move |n: &str| n.starts_with("thermal.") || (!no_dat && Discriminators::is_param(n));
    let mut s = Session::new(&model.store, &trainable);

    let thermal = s.input(stack(batch.iter().map(|p| &p.thermal))?);
    let (bb, pyr) = model.detector.branch_forward(&mut s, Branch::Thermal, thermal)?;
    let rgb_pyr: Vec<_> = (0..NUM_LEVELS)
        .map(|f| stack(batch.iter().map(|p| &p.rgb_pyramid.levels[f])).map(|t| s.input(t)))
        .collect::<Result<_>>()?;
    let masks: Vec<Vec<BinaryMask>> = (0..NUM_LEVELS).map(|f| batch.iter().map(|p| p.fg_masks[f].clone()).collect()).collect();

    let beta = match cfg.alignment_normalization {
        AlignmentNormalization::Masked => cfg.beta,
        AlignmentNormalization::All => {
            // Mean over all elements = masked mean x foreground fraction.
            let mut b = cfg.beta.0;
            for (f, level) in masks.iter().enumerate() {
                let ones: usize = level.iter().map(|m| m.ones()).sum();
                let total: usize = level.iter().map(|m| m.bits().len()).sum();
                b[f] *= ones as f32 / total.max(1) as f32;
            }
            AlignmentWeights(b)
        }
    };
    let align = fpn_alignment_loss(&mut s, &rgb_pyr, &pyr, &masks, &beta)?;
    let mut total = align.total;
    let mut l_d = [0.0f32; 3];
    let mut bn_stats: Vec<(BatchNorm, (Vec<f32>, Vec<f32>), usize)> = Vec::new();
    if !cfg.no_dat {
        let rgb_levels: [_; 3] = std::array::from_fn(|i| {
            let t = stack(batch.iter().map(|p| p.rgb_levels.levels()[i])).expect("uniform pair dims");
            s.input(t)
        });
        let ext_masks: [Vec<BinaryMask>; 3] = std::array::from_fn(|i| batch.iter().map(|p| p.extractor_masks[i].clone()).collect());
        let adv = adversarial_loss(&mut s, rgb_levels, bb.extractor_levels(), &model.discs, grl.lambda, cfg.gamma, Some(&ext_masks), rng)?;
        for (i, v) in adv.per_level.iter().enumerate() {
            l_d[i] = s.value(*v).item();
        }
        total = s.graph.weighted_sum(&[(total, 1.0), (adv.total, 1.0)]);
        for (bn, node) in &adv.bn_nodes {
            if let Some(stats) = s.graph.batch_stats(*node) {
                let (n, _, h, w) = s.value(*node).dims4();
                bn_stats.push((bn.clone(), stats, n * h * w));
            }
        }
    }
    let l_fpn = s.value(align.total).item();
    let total_v = s.value(total).item();
    for (which, v) in [("L_FPN", l_fpn), ("L_D3", l_d[0]), ("L_D4", l_d[1]), ("L_D5", l_d[2])] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: 0, which: which.into() });
        }
    }
    let mut g = s.graph.backward(total)?;
    let grads = s.named_grads(&mut g);
    drop(s);

    let mut grad_norms: BTreeMap<&'static str, f64> = PARAM_GROUPS.iter().map(|&k| (k, 0.0)).collect();
    for (name, t) in &grads {
        *grad_norms.entry(param_group(name)).or_default() += t.sq_norm();
    }
    adam.step(&mut model.store, &grads, lr)?;
    for (bn, stats, count) in bn_stats {
        crate::nn::update_running_stats(&mut model.store, &bn, stats, count)?;
    }
    Ok(StepReport { l_d, l_fpn, total: total_v, grad_norms })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub l_d: [f32; 3],
    pub l_fpn: f32,
    pub lambda_adapt: f32,
    pub lr: f32,
}

pub const LOG_HEADER: &str = "iteration,L_D3,L_D4,L_D5,L_FPN,lambda_adapt,lr";

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.iteration, r.l_d[0], r.l_d[1], r.l_d[2], r.l_fpn, r.lambda_adapt, r.lr);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub adam: Adam,
    /// Largest per-step squared gradient norm seen for every group.
    pub max_grad_norms: BTreeMap<&'static str, f64>,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Runs `cfg.iterations` steps. An epoch is one pass over `pairs`; batches
/// are drawn from a fresh seeded permutation each epoch.
pub fn train(model: &mut Model, pairs: &[TrainingPair], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no training pairs".into()));
    }
    let b = cfg.batch_size.min(pairs.len());
    let iters_per_epoch = pairs.len().div_ceil(b);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut adam = Adam::new();
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut max_grad_norms: BTreeMap<&'static str, f64> = PARAM_GROUPS.iter().map(|&k| (k, 0.0)).collect();
    for it in 0..cfg.iterations {
        let epoch = it / iters_per_epoch;
        if it % iters_per_epoch == 0 {
            order.shuffle(&mut rng);
        }
        let start = (it % iters_per_epoch) * b;
        let batch: Vec<&TrainingPair> = (start..start + b).map(|k| &pairs[order[k % pairs.len()]]).collect();
        let grl = GrlState::at(it, cfg.iterations);
        let lr = cfg.lr_at_epoch(epoch);
        let report = train_step(model, &mut adam, &batch, grl, cfg, lr, &mut rng).map_err(|e| match e {
            Error::NonFiniteLoss { which, .. } => Error::NonFiniteLoss { iteration: it, which },
            other => other,
        })?;
        for (k, v) in &report.grad_norms {
            let e = max_grad_norms.entry(k).or_default();
            *e = e.max(*v);
        }
        log.push(LogRow { iteration: it, l_d: report.l_d, l_fpn: report.l_fpn, lambda_adapt: grl.lambda, lr });
        if it % 100 == 0 {
            log::info!("step {it}: L_FPN {:.5} L_D {:?} lambda {:.3} lr {:.2e}", report.l_fpn, report.l_d, grl.lambda, lr);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                model.bundle(&adam, it + 1, cfg).save(&dir.join("checkpoints").join(format!("iter_{:06}", it + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        model.bundle(&adam, cfg.iterations, cfg).save(&dir.join(CHECKPOINT_DIR))?;
        write_text(&dir.join(LOG_FILE), &format_log(&log))?;
    }
    Ok(TrainOutcome { log, adam, max_grad_norms })
}

/// Held-out accuracy of the three discriminators (evaluation mode) at
/// telling RGB maps (label 0) from thermal maps (label 1), averaged.
pub fn discriminator_accuracy(model: &Model, pairs: &[TrainingPair]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for p in pairs {
        let (thermal, _) = model.detector.extract(&model.store, Branch::Thermal, p.thermal.clone())?;
        for (i, d) in model.discs.discs.iter().enumerate() {
            let pr = d.predict(&model.store, p.rgb_levels.levels()[i])?;
            let pt = d.predict(&model.store, thermal.levels()[i])?;
            correct += pr.iter().filter(|&&v| v < 0.5).count() + pt.iter().filter(|&&v| v >= 0.5).count();
            total += pr.len() + pt.len();
        }
    }
    Ok(if total == 0 { f64::NAN } else { correct as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_split, SceneSpec};

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig { batch_size: 2, iterations: 4, ..Default::default() };
        cfg.detector.widths = [4, 4, 8, 8];
        cfg.detector.fpn_channels = 8;
        cfg
    }

    fn tiny_pairs(model: &Model, cfg: &TrainConfig, n: usize) -> Vec<TrainingPair> {
        let spec = SceneSpec { height: 64, width: 64, crowns: (1, 3), radius: (4.0, 8.0), shadow_margin: 2.0, ..SceneSpec::default() };
        let scenes = generate_split(&spec, 0, n).unwrap();
        let pairs: Vec<(String, ImagePair)> = scenes.into_iter().enumerate().map(|(i, s)| (format!("p{i}"), s.pair)).collect();
        prepare_pairs(model, cfg, &pairs, &MaskCache::default()).unwrap()
    }

    #[test]
    fn frozen_groups_stay_put_and_losses_are_finite() {
        let cfg = tiny_cfg();
        let mut model = Model::new(&cfg, 0);
        let pairs = tiny_pairs(&model, &cfg, 3);
        let rgb_before = model.store.checksum("rgb.");
        let head_before = model.store.checksum("head.");
        let thermal_before = model.store.checksum("thermal.");
        let out = train(&mut model, &pairs, &cfg, None).unwrap();
        assert_eq!(out.log.len(), 4);
        assert!(out.log.iter().all(|r| r.l_fpn.is_finite() && r.l_d.iter().all(|v| v.is_finite())));
        assert_eq!(model.store.checksum("rgb."), rgb_before);
        assert_eq!(model.store.checksum("head."), head_before);
        assert_ne!(model.store.checksum("thermal."), thermal_before);
        assert_eq!(out.max_grad_norms["rgb_branch"], 0.0);
        assert_eq!(out.max_grad_norms["heads"], 0.0);
        assert!(out.max_grad_norms["discriminators"] > 0.0);
        assert!(out.max_grad_norms["thermal_pre_layer"] > 0.0);
    }

    #[test]
    fn no_dat_leaves_discriminators_untouched() {
        let cfg = TrainConfig { no_dat: true, ..tiny_cfg() };
        let mut model = Model::new(&cfg, 0);
        let pairs = tiny_pairs(&model, &cfg, 2);
        let before = model.store.checksum("disc");
        let out = train(&mut model, &pairs, &cfg, None).unwrap();
        assert_eq!(model.store.checksum("disc"), before);
        assert!(out.log.iter().all(|r| r.l_d == [0.0; 3]));
    }

    #[test]
    fn zero_iterations_and_determinism() {
        let cfg = TrainConfig { iterations: 0, ..tiny_cfg() };
        let mut model = Model::new(&cfg, 0);
        let init = model.store.clone();
        let pairs = tiny_pairs(&model, &cfg, 2);
        train(&mut model, &pairs, &cfg, None).unwrap();
        assert_eq!(model.store, init);

        let cfg = tiny_cfg();
        let run = || {
            let mut m = Model::new(&cfg, 0);
            let p = tiny_pairs(&m, &cfg, 3);
            format_log(&train(&mut m, &p, &cfg, None).unwrap().log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_batch_rejected() {
        let cfg = tiny_cfg();
        let mut model = Model::new(&cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(train_step(&mut model, &mut Adam::new(), &[], GrlState::at(0, 1), &cfg, 1e-3, &mut rng).is_err());
    }

    #[test]
    fn pixelwise_variant_trains() {
        let cfg = TrainConfig { pixelwise_dat: true, iterations: 2, ..tiny_cfg() };
        let mut model = Model::new(&cfg, 0);
        let pairs = tiny_pairs(&model, &cfg, 2);
        let out = train(&mut model, &pairs, &cfg, None).unwrap();
        assert!(out.log.iter().all(|r| r.l_d.iter().all(|v| v.is_finite())));
    }
}
