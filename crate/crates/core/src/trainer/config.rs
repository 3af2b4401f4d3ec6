use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::alignment::AlignmentWeights;
use crate::detector::{DetectorConfig, PostprocessConfig, PyramidConvention, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::fusion::FusionWeights;

/// How the masked squared error is averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignmentNormalization {
    /// Mean over foreground elements only.
    Masked,
    /// Mean over every element, zeros outside the mask.
    All,
}

/// Every knob of source pretraining, adaptation and inference. Serialized
/// as flat `key = value` text; see [`TrainConfig::KEYS`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f32,
    pub lr_decay: f32,
    pub gamma: f32,
    pub beta: AlignmentWeights,
    pub fusion: FusionWeights,
    pub alignment_normalization: AlignmentNormalization,
    pub no_dat: bool,
    pub no_fg_mask: bool,
    pub detector_pred_mask: bool,
    pub pixelwise_dat: bool,
    pub seed: u64,
    pub detector: DetectorConfig,
    pub post: PostprocessConfig,
    /// Save a checkpoint every this many iterations (0: final only).
    pub checkpoint_every: usize,
    pub mask_cache: Option<PathBuf>,
    pub pretrain_iterations: usize,
    pub pretrain_lr: f32,
    pub pretrain_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            iterations: 2000,
            lr: 1e-3,
            lr_decay: 0.9,
            gamma: 2.0,
            beta: AlignmentWeights::default(),
            fusion: FusionWeights::default(),
            alignment_normalization: AlignmentNormalization::Masked,
            no_dat: false,
            no_fg_mask: false,
            detector_pred_mask: false,
            pixelwise_dat: false,
            seed: 0,
            detector: DetectorConfig::default(),
            post: PostprocessConfig::default(),
            checkpoint_every: 0,
            mask_cache: None,
            pretrain_iterations: 1500,
            pretrain_lr: 1e-3,
            pretrain_batch_size: 8,
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse::<T>().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got `{v}`"))),
    }
}

fn fixed<const N: usize, T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = parse_list(key, v)?;
    items.try_into().map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 28] = [
        "batch_size",
        "iterations",
        "lr",
        "lr_decay",
        "gamma",
        "beta",
        "lambda_t",
        "eta",
        "alignment_normalization",
        "no_dat",
        "no_fg_mask",
        "detector_pred_mask",
        "pixelwise_dat",
        "seed",
        "widths",
        "fpn_channels",
        "pyramid",
        "aspect_ratios",
        "anchor_scale",
        "score_threshold",
        "nms_threshold",
        "max_detections",
        "pre_nms_top_k",
        "checkpoint_every",
        "mask_cache",
        "pretrain_iterations",
        "pretrain_lr",
        "pretrain_batch_size",
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.detector;
        Some(match key {
            "batch_size" => self.batch_size.to_string(),
            "iterations" => self.iterations.to_string(),
            "lr" => self.lr.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "gamma" => self.gamma.to_string(),
            "beta" => list(&self.beta.0),
            "lambda_t" => self.fusion.lambda_t.to_string(),
            "eta" => list(&self.fusion.eta),
            "alignment_normalization" => match self.alignment_normalization {
                AlignmentNormalization::Masked => "masked".into(),
                AlignmentNormalization::All => "all".into(),
            },
            "no_dat" => self.no_dat.to_string(),
            "no_fg_mask" => self.no_fg_mask.to_string(),
            "detector_pred_mask" => self.detector_pred_mask.to_string(),
            "pixelwise_dat" => self.pixelwise_dat.to_string(),
            "seed" => self.seed.to_string(),
            "widths" => list(&d.widths),
            "fpn_channels" => d.fpn_channels.to_string(),
            "pyramid" => d.convention.as_str().into(),
            "aspect_ratios" => list(&d.aspect_ratios),
            "anchor_scale" => d.anchor_scale.to_string(),
            "score_threshold" => self.post.score_threshold.to_string(),
            "nms_threshold" => self.post.nms_threshold.to_string(),
            "max_detections" => self.post.max_detections.to_string(),
            "pre_nms_top_k" => self.post.pre_nms_top_k.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "mask_cache" => self.mask_cache.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "pretrain_iterations" => self.pretrain_iterations.to_string(),
            "pretrain_lr" => self.pretrain_lr.to_string(),
            "pretrain_batch_size" => self.pretrain_batch_size.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "beta" => self.beta = AlignmentWeights::new(fixed::<NUM_LEVELS, f32>(key, v)?)?,
            "lambda_t" => self.fusion = FusionWeights::new(parse(key, v)?, self.fusion.eta)?,
            "eta" => self.fusion = FusionWeights::new(self.fusion.lambda_t, fixed::<NUM_LEVELS, f32>(key, v)?)?,
            "alignment_normalization" => {
                self.alignment_normalization = match v.trim() {
                    "masked" => AlignmentNormalization::Masked,
                    "all" => AlignmentNormalization::All,
                    _ => return Err(Error::Config(format!("{key}: expected masked or all, got `{v}`"))),
                }
            }
            "no_dat" => self.no_dat = parse_bool(key, v)?,
            "no_fg_mask" => self.no_fg_mask = parse_bool(key, v)?,
            "detector_pred_mask" => self.detector_pred_mask = parse_bool(key, v)?,
            "pixelwise_dat" => self.pixelwise_dat = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "widths" => self.detector.widths = fixed::<4, usize>(key, v)?,
            "fpn_channels" => self.detector.fpn_channels = parse(key, v)?,
            "pyramid" => self.detector.convention = PyramidConvention::parse(v.trim())?,
            "aspect_ratios" => self.detector.aspect_ratios = parse_list(key, v)?,
            "anchor_scale" => self.detector.anchor_scale = parse(key, v)?,
            "score_threshold" => self.post.score_threshold = parse(key, v)?,
            "nms_threshold" => self.post.nms_threshold = parse(key, v)?,
            "max_detections" => self.post.max_detections = parse(key, v)?,
            "pre_nms_top_k" => self.post.pre_nms_top_k = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "mask_cache" => self.mask_cache = Some(v.trim()).filter(|s| !s.is_empty()).map(PathBuf::from),
            "pretrain_iterations" => self.pretrain_iterations = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "pretrain_batch_size" => self.pretrain_batch_size = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        Self::KEYS.iter().map(|k| (k.to_string(), self.get(k).expect("every key has a value"))).collect()
    }

    /// Defaults overridden by `map`; unknown keys are errors.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(map)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in map {
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.pretrain_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay {} outside (0, 1]", self.lr_decay)));
        }
        if !(self.lr > 0.0 && self.pretrain_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be non-negative".into()));
        }
        if self.no_fg_mask && self.detector_pred_mask {
            return Err(Error::Config("no_fg_mask and detector_pred_mask are exclusive".into()));
        }
        if self.detector.aspect_ratios.is_empty() || self.detector.fpn_channels == 0 {
            return Err(Error::Config("detector needs anchors and pyramid channels".into()));
        }
        Ok(())
    }

    /// `lr * lr_decay^epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f32 {
        lr_schedule(self.lr, self.lr_decay, epoch)
    }
}

/// Exponential per-epoch decay.
pub fn lr_schedule(initial: f32, decay: f32, epoch: usize) -> f32 {
    (initial as f64 * (decay as f64).powi(epoch as i32)) as f32
}
