//! Deterministic synthetic RGB-thermal scenes with crown annotations.
//!
//! Visible crowns are bright textured discs on dark ground. A shadowed crown
//! sits inside a near-black cast shadow that covers its whole box, so in RGB
//! it never crosses the background marker threshold; in thermal every crown
//! is an equally warm disc over cooler ground.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::evaluation::GroundTruthBox;
use crate::image::{Image, ImagePair};
use crate::io::{write_annotations, write_manifest, PairEntry};
use crate::mask_gen::{BinaryMask, Polarity, BG_MARKER_MAX};
use crate::nn::sample_normal;

/// Highest channel value inside a shadow; keeps grayscale and its 8-bit
/// quantization strictly under the background marker threshold.
const SHADOW_CEIL: f32 = 18.0 / 255.0;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of crowns attempted per scene.
    pub crowns: (usize, usize),
    /// Inclusive crown radius range in pixels.
    pub radius: (f32, f32),
    pub shadow_fraction: f32,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f32,
    /// Pixels of cast shadow around a shadowed crown's box.
    pub shadow_margin: f32,
    /// Minimum gap between crown discs; negative values allow overlap.
    pub min_gap: f32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            crowns: (4, 9),
            radius: (12.0, 28.0),
            shadow_fraction: 0.3,
            noise: 0.02,
            shadow_margin: 4.0,
            min_gap: 2.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// Half-size scenes used for desk-scale experiments.
    pub fn small() -> Self {
        Self { height: 128, width: 128, crowns: (6, 10), radius: (7.0, 14.0), shadow_margin: 3.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::Config(format!("scene dims {}x{} must be positive multiples of 32", self.height, self.width)));
        }
        if !(0.0..=1.0).contains(&self.shadow_fraction) {
            return Err(Error::Config(format!("shadow fraction {} outside [0, 1]", self.shadow_fraction)));
        }
        if self.crowns.0 > self.crowns.1 || !(self.radius.0 >= 1.0 && self.radius.0 <= self.radius.1) {
            return Err(Error::Config("crown count and radius ranges must be non-empty".into()));
        }
        let diameter = 2.0 * (self.radius.1 + self.shadow_margin) + 2.0;
        if diameter >= self.height.min(self.width) as f32 {
            return Err(Error::Config("crowns do not fit in the scene".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crown {
    pub cx: f32,
    pub cy: f32,
    pub r: f32,
    pub shadowed: bool,
}

impl Crown {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.cx - self.r, self.cy - self.r, self.cx + self.r, self.cy + self.r)
    }

    fn shadow_box(&self, margin: f32) -> BBox {
        let b = self.bbox();
        BBox::new(b.xmin - margin, b.ymin - margin, b.xmax + margin, b.ymax + margin)
    }

    /// Whether pixel `(y, x)`'s center lies inside the disc.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (dx, dy) = (x as f32 + 0.5 - self.cx, y as f32 + 0.5 - self.cy);
        dx * dx + dy * dy <= self.r * self.r
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub pair: ImagePair,
    pub annotations: Vec<GroundTruthBox>,
    pub crowns: Vec<Crown>,
    /// Exact background geometry (BG-is-one): everything outside visible
    /// crowns, shadowed crowns included.
    pub gt_bg_mask: BinaryMask,
    /// Crowns requested but not placed because of overlap limits.
    pub dropped: usize,
}

fn box_hits_disc(b: &BBox, c: &Crown) -> bool {
    let nx = c.cx.clamp(b.xmin, b.xmax);
    let ny = c.cy.clamp(b.ymin, b.ymax);
    (nx - c.cx).powi(2) + (ny - c.cy).powi(2) < c.r * c.r
}

fn place_crowns(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Vec<Crown>, usize) {
    let want = rng.random_range(spec.crowns.0..=spec.crowns.1);
    let mut crowns: Vec<Crown> = Vec::with_capacity(want);
    let mut dropped = 0;
    for _ in 0..want {
        let r = rng.random_range(spec.radius.0..=spec.radius.1);
        let shadowed = rng.random::<f32>() < spec.shadow_fraction;
        let pad = r + spec.shadow_margin + 1.0;
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c = Crown {
                cx: rng.random_range(pad..spec.width as f32 - pad),
                cy: rng.random_range(pad..spec.height as f32 - pad),
                r,
                shadowed,
            };
            let ok = crowns.iter().all(|o| {
                let d = ((c.cx - o.cx).powi(2) + (c.cy - o.cy).powi(2)).sqrt();
                if d < c.r + o.r + spec.min_gap {
                    return false;
                }
                // No visible crown may poke into a shadow.
                let m = spec.shadow_margin + 1.0;
                !(c.shadowed && !o.shadowed && box_hits_disc(&c.shadow_box(m), o))
                    && !(o.shadowed && !c.shadowed && box_hits_disc(&o.shadow_box(m), &c))
            });
            if ok {
                placed = Some(c);
                break;
            }
        }
        match placed {
            Some(c) => crowns.push(c),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("scene seed {}: dropped {dropped} crown(s) that could not be placed", spec.seed);
    }
    (crowns, dropped)
}

/// Smooth value noise in `[-1, 1]` from a coarse random lattice.
fn value_noise(h: usize, w: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f32 / cell as f32;
        let (y0, ty) = (fy as usize, fy.fract());
        for x in 0..w {
            let fx = x as f32 / cell as f32;
            let (x0, tx) = (fx as usize, fx.fract());
            let l = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
            let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn box_blur(plane: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let yy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                    let xx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                    acc += plane[yy * w + xx];
                }
            }
            out[y * w + x] = acc / 9.0;
        }
    }
    out
}

/// Renders one registered scene. Output images are 8-bit quantized so that
/// saved and in-memory scenes agree exactly.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (crowns, dropped) = place_crowns(spec, &mut rng);

    let ground = value_noise(h, w, 16, &mut rng);
    let heat = value_noise(h, w, 24, &mut rng);
    let mut rgb = Image::filled(3, h, w, 0.0);
    let mut thermal = vec![0.0f32; h * w];
    let mut shadow = vec![false; h * w];
    let margin = spec.shadow_margin;
    for c in crowns.iter().filter(|c| c.shadowed) {
        let b = c.shadow_box(margin);
        for y in (b.ymin.floor().max(0.0) as usize)..(b.ymax.ceil() as usize).min(h) {
            for x in (b.xmin.floor().max(0.0) as usize)..(b.xmax.ceil() as usize).min(w) {
                shadow[y * w + x] = true;
            }
        }
    }

    let tint = [1.25f32, 1.0, 0.6];
    let leaf = [0.62f32, 1.0, 0.42];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = 0.095 + 0.04 * ground[i];
            let mut px = tint.map(|t| t * g);
            let mut temp = 0.32 + 0.06 * heat[i];
            if shadow[i] {
                px = tint.map(|t| t * 0.03 * (1.0 + 0.3 * ground[i]));
                temp -= 0.06;
            }
            for c in &crowns {
                if !c.contains(y, x) {
                    continue;
                }
                let (dx, dy) = (x as f32 + 0.5 - c.cx, y as f32 + 0.5 - c.cy);
                let rr = (dx * dx + dy * dy) / (c.r * c.r);
                let speckle = rng.random_range(-1.0f32..1.0);
                if c.shadowed {
                    let v = 0.05 + 0.012 * speckle - 0.015 * rr;
                    px = leaf.map(|l| l * v);
                } else {
                    let v = 0.82 * (1.0 - 0.45 * rr) + 0.07 * speckle;
                    px = leaf.map(|l| l * v);
                }
                temp = 0.78 - 0.18 * rr + 0.02 * speckle;
            }
            for (ch, v) in px.iter().enumerate() {
                let mut v = v + spec.noise * sample_normal(&mut rng);
                if shadow[i] {
                    v = v.min(SHADOW_CEIL);
                }
                rgb.set(ch, y, x, v.clamp(0.0, 1.0));
            }
            thermal[i] = temp;
        }
    }
    let mut thermal = box_blur(&thermal, h, w);
    for t in thermal.iter_mut() {
        *t = (*t + spec.noise * sample_normal(&mut rng)).clamp(0.0, 1.0);
    }
    let thermal = Image::new(1, h, w, thermal)?.quantized();
    let rgb = rgb.quantized();
    debug_assert!(SHADOW_CEIL < BG_MARKER_MAX);

    let mut bg = vec![1u8; h * w];
    for c in crowns.iter().filter(|c| !c.shadowed) {
        for y in 0..h {
            for x in 0..w {
                if c.contains(y, x) {
                    bg[y * w + x] = 0;
                }
            }
        }
    }
    let annotations = crowns.iter().map(|c| GroundTruthBox { bbox: c.bbox(), difficult: c.shadowed }).collect();
    Ok(Scene {
        pair: ImagePair::new(rgb, thermal)?,
        annotations,
        crowns,
        gt_bg_mask: BinaryMask::new(h, w, bg, Polarity::BackgroundOne)?,
        dropped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, usize)> {
        [("train", self.train), ("val", self.val), ("test", self.test)].into_iter()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifests {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

impl DatasetManifests {
    pub fn split(&self, name: &str) -> Option<&Path> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Per-scene seeds for a split. Each split draws from its own ChaCha stream.
pub fn split_seeds(seed: u64, split: usize, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split as u64 + 1);
    (0..count).map(|_| rng.random()).collect()
}

fn dir_is_nonempty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut it| it.next().is_some()).unwrap_or(false)
}

/// Writes `train/`, `val/` and `test/` splits, each with `rgb/`, `thermal/`,
/// `ann/`, `bgmask/` and a `manifest.csv`.
pub fn generate_dataset(spec: &SceneSpec, counts: SplitCounts, out_dir: &Path, force: bool) -> Result<DatasetManifests> {
    spec.validate()?;
    if dir_is_nonempty(out_dir) && !force {
        return Err(Error::InvalidInput(format!(
            "{} exists and is not empty (pass force to overwrite)",
            out_dir.display()
        )));
    }
    let mut paths = Vec::new();
    for (split_idx, (name, count)) in counts.iter().enumerate() {
        let root = out_dir.join(name);
        for sub in ["rgb", "thermal", "ann", "bgmask"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut entries = Vec::with_capacity(count);
        for (i, seed) in split_seeds(spec.seed, split_idx, count).into_iter().enumerate() {
            let scene = generate_scene(&SceneSpec { seed, ..spec.clone() })?;
            let id = format!("{name}_{i:05}");
            let entry = PairEntry {
                id: id.clone(),
                rgb: root.join("rgb").join(format!("{id}.png")),
                thermal: root.join("thermal").join(format!("{id}.png")),
                annotations: Some(root.join("ann").join(format!("{id}.csv"))),
            };
            scene.pair.rgb.save(&entry.rgb)?;
            scene.pair.thermal.save(&entry.thermal)?;
            scene.gt_bg_mask.to_image().save(&root.join("bgmask").join(format!("{id}.png")))?;
            write_annotations(entry.annotations.as_ref().expect("set above"), &id, &scene.annotations)?;
            entries.push(entry);
        }
        let manifest = root.join("manifest.csv");
        write_manifest(&manifest, &entries)?;
        paths.push(manifest);
    }
    Ok(DatasetManifests { train: paths[0].clone(), val: paths[1].clone(), test: paths[2].clone() })
}

/// In-memory split with the same seeds `generate_dataset` would use.
pub fn generate_split(spec: &SceneSpec, split: usize, count: usize) -> Result<Vec<Scene>> {
    split_seeds(spec.seed, split, count)
        .into_iter()
        .map(|seed| generate_scene(&SceneSpec { seed, ..spec.clone() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask_gen::{to_grayscale, FG_MARKER_MIN};

    fn gray_in_box(scene: &Scene, b: &BBox) -> Vec<f32> {
        let g = to_grayscale(&scene.pair.rgb).unwrap();
        let (h, w) = scene.pair.dims();
        let mut out = Vec::new();
        for y in (b.ymin.floor() as usize)..(b.ymax.ceil() as usize).min(h) {
            for x in (b.xmin.floor() as usize)..(b.xmax.ceil() as usize).min(w) {
                out.push(g.get(0, y, x));
            }
        }
        out
    }

    #[test]
    fn no_shadows_means_no_difficult_boxes() {
        let s = generate_scene(&SceneSpec { shadow_fraction: 0.0, ..SceneSpec::small() }).unwrap();
        assert!(!s.annotations.is_empty());
        assert!(s.annotations.iter().all(|a| !a.difficult));
    }

    #[test]
    fn all_shadowed_crowns_stay_dark() {
        let s = generate_scene(&SceneSpec { shadow_fraction: 1.0, noise: 0.0, seed: 3, ..SceneSpec::small() }).unwrap();
        let g = to_grayscale(&s.pair.rgb).unwrap();
        for c in &s.crowns {
            assert!(c.shadowed);
            for y in 0..128 {
                for x in 0..128 {
                    if c.contains(y, x) {
                        assert!(g.get(0, y, x) <= FG_MARKER_MIN);
                    }
                }
            }
        }
    }

    #[test]
    fn labels_are_sound() {
        for seed in 0..20 {
            let s = generate_scene(&SceneSpec { seed, shadow_fraction: 0.5, ..SceneSpec::small() }).unwrap();
            for a in &s.annotations {
                let g = gray_in_box(&s, &a.bbox);
                if a.difficult {
                    assert!(g.iter().all(|&v| v < BG_MARKER_MAX), "seed {seed}");
                } else {
                    assert!(g.iter().any(|&v| v > FG_MARKER_MIN), "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn deterministic_and_registered() {
        let spec = SceneSpec { seed: 11, ..SceneSpec::small() };
        let (a, b) = (generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        assert_eq!(a.pair.rgb.data(), b.pair.rgb.data());
        assert_eq!(a.pair.thermal.data(), b.pair.thermal.data());
        // Every crown is warm at its center in thermal.
        for c in &a.crowns {
            assert!(a.pair.thermal.get(0, c.cy as usize, c.cx as usize) > 0.6);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_scene(&SceneSpec { height: 100, ..SceneSpec::small() }).is_err());
        assert!(generate_scene(&SceneSpec { shadow_fraction: 1.5, ..SceneSpec::small() }).is_err());
    }

    #[test]
    fn dataset_layout_and_force() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { height: 64, width: 64, crowns: (1, 3), radius: (4.0, 8.0), shadow_margin: 2.0, ..SceneSpec::default() };
        let counts = SplitCounts { train: 4, val: 1, test: 2 };
        let m = generate_dataset(&spec, counts, dir.path(), false).unwrap();
        let rows = crate::io::read_manifest(&m.train).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.rgb.is_file() && r.thermal.is_file() && r.annotations.as_ref().unwrap().is_file()));
        assert!(generate_dataset(&spec, counts, dir.path(), false).is_err());
        assert!(generate_dataset(&spec, counts, dir.path(), true).is_ok());
        let all: Vec<u64> = (0..3).flat_map(|s| split_seeds(0, s, 50)).collect();
        let mut uniq = all.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), all.len());
    }
}
