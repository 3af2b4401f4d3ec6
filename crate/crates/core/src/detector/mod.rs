//! Two-branch one-stage detector.
//!
//! Each branch (`rgb.*`, `thermal.*` in the [`ParamStore`]) is a residual
//! backbone exposing C2..C5 followed by a five-level feature pyramid. The
//! thermal branch is prefixed by a 1x1 pre-layer lifting one channel to
//! three. Classification and regression heads (`head.*`) are shared.

mod anchors;
mod postprocess;

pub use anchors::{decode, encode, Anchor, AnchorGrid};
pub use postprocess::{nms, postprocess, PostprocessConfig};

use rand::Rng;

use crate::autograd::Var;
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{frozen, Conv, ParamStore, Session};
use crate::tensor::Tensor;

pub const NUM_LEVELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Rgb,
    Thermal,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Rgb => "rgb",
            Branch::Thermal => "thermal",
        }
    }

    pub fn name(self) -> &'static str {
        self.prefix()
    }
}

/// Which strides the five pyramid levels sit at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PyramidConvention {
    /// Strides 4/8/16/32/64: laterals from C2..C5 plus one stride-2 level.
    Fine,
    /// Strides 8..128: laterals from C3..C5 plus two stride-2 levels (P3-P7).
    Retina,
}

impl PyramidConvention {
    pub fn strides(self) -> [usize; NUM_LEVELS] {
        match self {
            PyramidConvention::Fine => [4, 8, 16, 32, 64],
            PyramidConvention::Retina => [8, 16, 32, 64, 128],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(PyramidConvention::Fine),
            "retina" => Ok(PyramidConvention::Retina),
            other => Err(Error::Config(format!("unknown pyramid convention {other:?} (fine|retina)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PyramidConvention::Fine => "fine",
            PyramidConvention::Retina => "retina",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    /// Channel widths of the four backbone stages (C2..C5).
    pub widths: [usize; 4],
    pub fpn_channels: usize,
    pub convention: PyramidConvention,
    /// Anchor height/width ratios.
    pub aspect_ratios: Vec<f32>,
    /// Anchor side = `anchor_scale * stride`.
    pub anchor_scale: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 128],
            fpn_channels: 64,
            convention: PyramidConvention::Fine,
            aspect_ratios: vec![0.7, 1.0, 1.4],
            anchor_scale: 4.0,
        }
    }
}

impl DetectorConfig {
    pub fn num_anchors(&self) -> usize {
        self.aspect_ratios.len()
    }

    pub fn level_dims(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        self.convention.strides().iter().map(|&s| (height.div_ceil(s), width.div_ceil(s))).collect()
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0 {
            return Err(Error::InvalidInput(format!(
                "image is {height}x{width}; both dims must be positive multiples of 32 (resize to {}x{})",
                height.div_ceil(32).max(1) * 32,
                width.div_ceil(32).max(1) * 32
            )));
        }
        Ok(())
    }
}

/// Backbone outputs at strides 4, 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct BackboneVars {
    pub c2: Var,
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
}

impl BackboneVars {
    /// The levels the domain discriminators attach to.
    pub fn extractor_levels(&self) -> [Var; 3] {
        [self.c3, self.c4, self.c5]
    }
}

/// Materialised C3/C4/C5 maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorLevels {
    pub c3: Tensor,
    pub c4: Tensor,
    pub c5: Tensor,
}

impl ExtractorLevels {
    pub fn levels(&self) -> [&Tensor; 3] {
        [&self.c3, &self.c4, &self.c5]
    }
}

/// Five feature maps, index 0 = largest (finest) level.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.len() != NUM_LEVELS {
            return Err(Error::Shape(format!("pyramid needs {NUM_LEVELS} levels, got {}", levels.len())));
        }
        Ok(Self { levels })
    }

    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|t| (t.shape()[2], t.shape()[3])).collect()
    }

    pub fn sample(&self, n: usize) -> FeaturePyramid {
        FeaturePyramid { levels: self.levels.iter().map(|t| t.sample(n)).collect() }
    }
}

/// Raw head outputs for one level: logits `[N, A, H, W]`, deltas `[N, 4A, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput {
    pub logits: Tensor,
    pub deltas: Tensor,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: DetectorConfig,
}

struct Block {
    conv1: Conv,
    conv2: Conv,
    skip: Conv,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Self {
        Self { cfg }
    }

    fn stem(&self, branch: Branch) -> Conv {
        Conv::new(format!("{}.bb.stem", branch.prefix()), 3, self.cfg.widths[0], 3, 2)
    }

    fn blocks(&self, branch: Branch) -> Vec<Block> {
        let mut cin = self.cfg.widths[0];
        (0..4)
            .map(|i| {
                let cout = self.cfg.widths[i];
                let p = format!("{}.bb.s{}", branch.prefix(), i + 2);
                let b = Block {
                    conv1: Conv::new(format!("{p}.conv1"), cin, cout, 3, 2),
                    conv2: Conv::new(format!("{p}.conv2"), cout, cout, 3, 1),
                    skip: Conv::new(format!("{p}.skip"), cin, cout, 1, 2),
                };
                cin = cout;
                b
            })
            .collect()
    }

    fn pre_conv(&self) -> Conv {
        Conv::new("thermal.pre", 1, 3, 1, 1)
    }

    /// Lateral (1x1) and output (3x3) convolutions plus the extra stride-2
    /// levels, in pyramid order.
    fn fpn_convs(&self, branch: Branch) -> (Vec<Conv>, Vec<Conv>, Vec<Conv>) {
        let f = self.cfg.fpn_channels;
        let p = branch.prefix();
        let w = self.cfg.widths;
        match self.cfg.convention {
            PyramidConvention::Fine => {
                let lat = (0..4).map(|i| Conv::new(format!("{p}.fpn.lat{}", i + 2), w[i], f, 1, 1)).collect();
                let out = (0..4).map(|i| Conv::new(format!("{p}.fpn.out{}", i + 2), f, f, 3, 1)).collect();
                let extra = vec![Conv::new(format!("{p}.fpn.extra1"), f, f, 3, 2)];
                (lat, out, extra)
            }
            PyramidConvention::Retina => {
                let lat = (1..4).map(|i| Conv::new(format!("{p}.fpn.lat{}", i + 2), w[i], f, 1, 1)).collect();
                let out = (1..4).map(|i| Conv::new(format!("{p}.fpn.out{}", i + 2), f, f, 3, 1)).collect();
                let extra = vec![
                    Conv::new(format!("{p}.fpn.extra1"), w[3], f, 3, 2),
                    Conv::new(format!("{p}.fpn.extra2"), f, f, 3, 2),
                ];
                (lat, out, extra)
            }
        }
    }

    fn head_convs(&self) -> [Conv; 4] {
        let f = self.cfg.fpn_channels;
        let a = self.cfg.num_anchors();
        [
            Conv::new("head.cls.tower", f, f, 3, 1),
            Conv::new("head.cls.out", f, a, 3, 1),
            Conv::new("head.reg.tower", f, f, 3, 1),
            Conv::new("head.reg.out", f, 4 * a, 3, 1),
        ]
    }

    fn init_branch(&self, branch: Branch, store: &mut ParamStore, rng: &mut impl Rng) {
        self.stem(branch).init(store, rng);
        for b in self.blocks(branch) {
            b.conv1.init(store, rng);
            // Residual branches start small so the skip path dominates.
            let fan = (b.conv2.cin * 9) as f32;
            b.conv2.init_scaled(store, rng, 0.5 * (2.0 / fan).sqrt());
            b.skip.init(store, rng);
        }
        let (lat, out, extra) = self.fpn_convs(branch);
        for c in lat.iter().chain(&out).chain(&extra) {
            let fan = (c.cin * c.k * c.k) as f32;
            c.init_scaled(store, rng, (1.0 / fan).sqrt());
        }
    }

    /// Fresh parameters: a random RGB branch, a thermal branch copied from
    /// it with a channel-replicating pre-layer, and prior-biased heads.
    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let mut store = ParamStore::new();
        self.init_branch(Branch::Rgb, &mut store, rng);
        for c in self.head_convs() {
            c.init_scaled(&mut store, rng, 0.01);
        }
        let prior: f32 = 0.01;
        store.insert("head.cls.out.b", Tensor::full(&[self.cfg.num_anchors()], -((1.0 - prior) / prior).ln()));
        self.sync_thermal_from_rgb(&mut store);
        store
    }

    /// Re-initialises the thermal branch as a copy of the RGB branch with a
    /// pre-layer that replicates the thermal channel.
    pub fn sync_thermal_from_rgb(&self, store: &mut ParamStore) {
        store.copy_prefix("rgb.", "thermal.");
        store.insert("thermal.pre.w", Tensor::full(&[3, 1, 1, 1], 1.0));
        store.insert("thermal.pre.b", Tensor::zeros(&[3]));
    }

    pub fn branch_param_names(&self, store: &ParamStore, branch: Branch) -> Vec<String> {
        let prefix = format!("{}.", branch.prefix());
        store.names().filter(|n| n.starts_with(&prefix)).cloned().collect()
    }

    pub fn pre_layer(&self, s: &mut Session, thermal: Var) -> Result<Var> {
        let c = s.value(thermal).shape()[1];
        if c != 1 {
            return Err(Error::InvalidInput(format!("thermal input must have 1 channel, got {c}")));
        }
        self.pre_conv().forward(s, thermal)
    }

    pub fn backbone(&self, s: &mut Session, branch: Branch, image: Var) -> Result<BackboneVars> {
        let (_, c, h, w) = s.value(image).dims4();
        if c != 3 {
            return Err(Error::InvalidInput(format!("backbone input must have 3 channels, got {c}")));
        }
        self.cfg.check_input(h, w)?;
        let x = self.stem(branch).forward(s, image)?;
        let mut x = s.graph.relu(x);
        let mut outs = Vec::with_capacity(4);
        for b in self.blocks(branch) {
            let y = b.conv1.forward(s, x)?;
            let y = s.graph.relu(y);
            let y = b.conv2.forward(s, y)?;
            let sk = b.skip.forward(s, x)?;
            let y = s.graph.add(y, sk)?;
            x = s.graph.relu(y);
            outs.push(x);
        }
        Ok(BackboneVars { c2: outs[0], c3: outs[1], c4: outs[2], c5: outs[3] })
    }

    /// Top-down pyramid; returns five levels, finest first.
    pub fn pyramid(&self, s: &mut Session, branch: Branch, bb: &BackboneVars) -> Result<Vec<Var>> {
        let (lat, out, extra) = self.fpn_convs(branch);
        let inputs: Vec<Var> = match self.cfg.convention {
            PyramidConvention::Fine => vec![bb.c2, bb.c3, bb.c4, bb.c5],
            PyramidConvention::Retina => vec![bb.c3, bb.c4, bb.c5],
        };
        let n = inputs.len();
        let mut merged: Vec<Option<Var>> = vec![None; n];
        let mut top = lat[n - 1].forward(s, inputs[n - 1])?;
        merged[n - 1] = Some(top);
        for i in (0..n - 1).rev() {
            let l = lat[i].forward(s, inputs[i])?;
            let up = s.graph.upsample2x(top);
            top = s.graph.add(l, up)?;
            merged[i] = Some(top);
        }
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        for (i, m) in merged.into_iter().enumerate() {
            levels.push(out[i].forward(s, m.expect("merged"))?);
        }
        match self.cfg.convention {
            PyramidConvention::Fine => {
                let last = *levels.last().expect("levels");
                levels.push(extra[0].forward(s, last)?);
            }
            PyramidConvention::Retina => {
                let p6 = extra[0].forward(s, bb.c5)?;
                levels.push(p6);
                let r = s.graph.relu(p6);
                levels.push(extra[1].forward(s, r)?);
            }
        }
        Ok(levels)
    }

    /// Pre-layer (thermal only), backbone and pyramid for one branch.
    pub fn branch_forward(&self, s: &mut Session, branch: Branch, input: Var) -> Result<(BackboneVars, Vec<Var>)> {
        let x = match branch {
            Branch::Rgb => input,
            Branch::Thermal => self.pre_layer(s, input)?,
        };
        let bb = self.backbone(s, branch, x)?;
        let pyr = self.pyramid(s, branch, &bb)?;
        Ok((bb, pyr))
    }

    /// Shared heads applied to each pyramid level: `(logits, deltas)`.
    pub fn heads(&self, s: &mut Session, pyramid: &[Var]) -> Result<Vec<(Var, Var)>> {
        let [ct, co, rt, ro] = self.head_convs();
        pyramid
            .iter()
            .map(|&p| {
                let c = ct.forward(s, p)?;
                let c = s.graph.relu(c);
                let c = co.forward(s, c)?;
                let r = rt.forward(s, p)?;
                let r = s.graph.relu(r);
                let r = ro.forward(s, r)?;
                Ok((c, r))
            })
            .collect()
    }

    /// Inference-only extraction for a batch of images: `[N, 3, H, W]` for
    /// RGB or `[N, 1, H, W]` for thermal.
    pub fn extract(&self, store: &ParamStore, branch: Branch, images: Tensor) -> Result<(ExtractorLevels, FeaturePyramid)> {
        let mut s = Session::new(store, &frozen);
        let x = s.input(images);
        let (bb, pyr) = self.branch_forward(&mut s, branch, x)?;
        let levels = ExtractorLevels {
            c3: s.value(bb.c3).clone(),
            c4: s.value(bb.c4).clone(),
            c5: s.value(bb.c5).clone(),
        };
        let pyramid = FeaturePyramid::new(pyr.iter().map(|&v| s.value(v).clone()).collect())?;
        Ok((levels, pyramid))
    }

    pub fn extract_image(&self, store: &ParamStore, branch: Branch, image: &Image) -> Result<(ExtractorLevels, FeaturePyramid)> {
        let expected = match branch {
            Branch::Rgb => 3,
            Branch::Thermal => 1,
        };
        if image.channels() != expected {
            return Err(Error::InvalidInput(format!(
                "{} branch expects {expected} channels, got {}",
                branch.name(),
                image.channels()
            )));
        }
        self.extract(store, branch, image.to_tensor())
    }

    pub fn detect_heads(&self, store: &ParamStore, pyramid: &FeaturePyramid) -> Result<Vec<LevelOutput>> {
        let mut s = Session::new(store, &frozen);
        let vars: Vec<Var> = pyramid.levels.iter().map(|t| s.input(t.clone())).collect();
        let outs = self.heads(&mut s, &vars)?;
        Ok(outs
            .into_iter()
            .map(|(c, r)| LevelOutput { logits: s.value(c).clone(), deltas: s.value(r).clone() })
            .collect())
    }

    pub fn anchors(&self, height: usize, width: usize) -> AnchorGrid {
        AnchorGrid::new(&self.cfg, height, width)
    }

    /// Heads plus decoding for a single-image pyramid.
    pub fn detect(&self, store: &ParamStore, pyramid: &FeaturePyramid, image_dims: (usize, usize), post: &PostprocessConfig) -> Result<Vec<Detection>> {
        let raw = self.detect_heads(store, pyramid)?;
        let anchors = self.anchors(image_dims.0, image_dims.1);
        postprocess(&raw, &anchors, image_dims, post)
    }

    /// Single-branch inference on one image.
    pub fn infer(&self, store: &ParamStore, branch: Branch, image: &Image, post: &PostprocessConfig) -> Result<Vec<Detection>> {
        let (_, pyr) = self.extract_image(store, branch, image)?;
        self.detect(store, &pyr, image.dims(), post)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f32,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Detector, ParamStore) {
        let cfg = DetectorConfig { widths: [4, 8, 8, 16], fpn_channels: 8, ..Default::default() };
        let det = Detector::new(cfg);
        let store = det.init(&mut ChaCha8Rng::seed_from_u64(7));
        (det, store)
    }

    #[test]
    fn stride_arithmetic_for_256() {
        let (det, store) = small();
        let (levels, pyr) = det.extract(&store, Branch::Rgb, Tensor::full(&[1, 3, 256, 256], 0.3)).unwrap();
        assert_eq!(levels.c3.shape()[2], 32);
        assert_eq!(levels.c4.shape()[2], 16);
        assert_eq!(levels.c5.shape()[2], 8);
        assert_eq!(pyr.dims(), vec![(64, 64), (32, 32), (16, 16), (8, 8), (4, 4)]);
        assert!(pyr.levels.iter().all(|t| t.shape()[1] == 8));
        assert_eq!(det.cfg.level_dims(256, 256), pyr.dims());
    }

    #[test]
    fn retina_convention_strides() {
        let cfg = DetectorConfig {
            widths: [4, 8, 8, 16],
            fpn_channels: 8,
            convention: PyramidConvention::Retina,
            ..Default::default()
        };
        let det = Detector::new(cfg);
        let store = det.init(&mut ChaCha8Rng::seed_from_u64(1));
        let (_, pyr) = det.extract(&store, Branch::Rgb, Tensor::full(&[1, 3, 128, 128], 0.3)).unwrap();
        assert_eq!(pyr.dims(), vec![(16, 16), (8, 8), (4, 4), (2, 2), (1, 1)]);
        assert_eq!(det.cfg.level_dims(128, 128), pyr.dims());
    }

    #[test]
    fn rejects_bad_dims_and_channels() {
        let (det, store) = small();
        let err = det.extract(&store, Branch::Rgb, Tensor::zeros(&[1, 3, 100, 128])).unwrap_err();
        assert!(err.to_string().contains("resize to 128x128"));
        assert!(det.extract(&store, Branch::Thermal, Tensor::zeros(&[1, 3, 64, 64])).is_err());
    }

    #[test]
    fn pre_layer_arithmetic() {
        let (det, mut store) = small();
        let t = Tensor::full(&[1, 1, 1, 1], 0.5);
        let run = |store: &ParamStore, t: Tensor| {
            let mut s = Session::new(store, &frozen);
            let x = s.input(t);
            let y = det.pre_layer(&mut s, x).unwrap();
            s.value(y).data().to_vec()
        };
        assert_eq!(run(&store, t.clone()), vec![0.5, 0.5, 0.5]);
        store.insert("thermal.pre.w", Tensor::new(vec![3, 1, 1, 1], vec![2.0, 0.0, -1.0]).unwrap());
        assert_eq!(run(&store, t), vec![1.0, 0.0, -0.5]);
        store.insert("thermal.pre.b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        assert_eq!(run(&store, Tensor::zeros(&[1, 1, 1, 1])), vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn replication_init_matches_rgb_on_gray_input() {
        let (det, store) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Vec<f32> = (0..64 * 64).map(|_| rng.random()).collect();
        let thermal = Image::new(1, 64, 64, t.clone()).unwrap();
        let rgb = Image::new(3, 64, 64, [t.clone(), t.clone(), t].concat()).unwrap();
        let (_, pt) = det.extract_image(&store, Branch::Thermal, &thermal).unwrap();
        let (_, pr) = det.extract_image(&store, Branch::Rgb, &rgb).unwrap();
        assert_eq!(pt, pr);
    }

    #[test]
    fn zero_extractor_and_laterals_give_zero_pyramid() {
        let (det, mut store) = small();
        let names: Vec<String> = store.names().filter(|n| n.starts_with("rgb.")).cloned().collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let (_, pyr) = det.extract(&store, Branch::Rgb, Tensor::full(&[1, 3, 64, 64], 0.7)).unwrap();
        assert!(pyr.levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn shared_heads_and_anchor_counts() {
        let (det, store) = small();
        let (_, p) = det.extract(&store, Branch::Rgb, Tensor::full(&[1, 3, 64, 64], 0.2)).unwrap();
        let a = det.detect_heads(&store, &p).unwrap();
        let b = det.detect_heads(&store, &p.clone()).unwrap();
        assert_eq!(a, b);
        let grid = det.anchors(64, 64);
        for (lvl, out) in a.iter().enumerate() {
            let (_, ch, h, w) = out.logits.dims4();
            assert_eq!(ch, 3);
            assert_eq!(grid.level(lvl).len(), h * w * 3);
            assert_eq!(out.deltas.shape()[1], 12);
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (det, store) = small();
        let img = Tensor::full(&[1, 3, 64, 64], 0.4);
        let a = det.extract(&store, Branch::Rgb, img.clone()).unwrap();
        let b = det.extract(&store, Branch::Rgb, img).unwrap();
        assert_eq!(a, b);
    }
}
