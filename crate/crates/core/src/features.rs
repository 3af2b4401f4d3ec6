//! Pooled pyramid features per image and branch, for embedding plots and a
//! linear probe of how separable the two modalities still are.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{Branch, Detector, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::image::ImagePair;
use crate::io::write_text;
use crate::mask_gen::{generate_level_masks, Polarity};
use crate::nn::ParamStore;

/// One pooled vector: global average of a pyramid level (level 1 = finest).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub image_id: String,
    pub branch: Branch,
    pub level: usize,
    pub values: Vec<f32>,
}

/// `2 * 5` rows per pair, RGB rows first.
pub fn pooled_rows(detector: &Detector, store: &ParamStore, id: &str, pair: &ImagePair) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::with_capacity(2 * NUM_LEVELS);
    for (branch, img) in [(Branch::Rgb, &pair.rgb), (Branch::Thermal, &pair.thermal)] {
        let (_, pyr) = detector.extract_image(store, branch, img)?;
        for (f, t) in pyr.levels.iter().enumerate() {
            rows.push(FeatureRow { image_id: id.to_string(), branch, level: f + 1, values: t.spatial_mean().into_data() });
        }
    }
    Ok(rows)
}

/// Like [`pooled_rows`], but each level is averaged over the RGB
/// foreground only (watershed mask of the RGB image, resized per level).
/// Levels whose mask is empty give zero vectors.
pub fn foreground_pooled_rows(detector: &Detector, store: &ParamStore, id: &str, pair: &ImagePair) -> Result<Vec<FeatureRow>> {
    let dims = detector.cfg.level_dims(pair.rgb.height(), pair.rgb.width());
    let masks = generate_level_masks(&pair.rgb, &dims, Polarity::ForegroundOne)?;
    let mut rows = Vec::with_capacity(2 * NUM_LEVELS);
    for (branch, img) in [(Branch::Rgb, &pair.rgb), (Branch::Thermal, &pair.thermal)] {
        let (_, pyr) = detector.extract_image(store, branch, img)?;
        for (f, (t, m)) in pyr.levels.iter().zip(&masks).enumerate() {
            let (_, c, h, w) = t.dims4();
            let count = m.ones().max(1) as f32;
            let values = (0..c)
                .map(|ch| {
                    let plane = &t.data()[ch * h * w..(ch + 1) * h * w];
                    plane.iter().zip(m.bits()).filter(|(_, &b)| b == 1).map(|(v, _)| v).sum::<f32>() / count
                })
                .collect();
            rows.push(FeatureRow { image_id: id.to_string(), branch, level: f + 1, values });
        }
    }
    Ok(rows)
}

pub fn export_features(detector: &Detector, store: &ParamStore, pairs: &[(String, ImagePair)]) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::with_capacity(pairs.len() * 2 * NUM_LEVELS);
    for (id, pair) in pairs {
        rows.extend(pooled_rows(detector, store, id, pair).map_err(|e| Error::Pair { pair_id: id.clone(), message: e.to_string() })?);
    }
    Ok(rows)
}

pub fn format_feature_csv(rows: &[FeatureRow]) -> String {
    let c = rows.first().map_or(0, |r| r.values.len());
    let mut s = String::from("image_id,branch,level");
    for i in 1..=c {
        let _ = write!(s, ",v{i}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{}", r.image_id, r.branch.name(), r.level);
        for v in &r.values {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_feature_csv(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    write_text(path, &format_feature_csv(rows))
}

pub fn read_feature_csv(path: &Path) -> Result<Vec<FeatureRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let bad = |what: &str| Error::format(path, format!("row {}: bad {what}", i + 2));
        if rec.len() < 3 {
            return Err(bad("column count"));
        }
        let branch = match &rec[1] {
            "rgb" => Branch::Rgb,
            "thermal" => Branch::Thermal,
            _ => return Err(bad("branch")),
        };
        let level = rec[2].parse().map_err(|_| bad("level"))?;
        let values = rec.iter().skip(3).map(|v| v.parse::<f32>().map_err(|_| bad("value"))).collect::<Result<_>>()?;
        rows.push(FeatureRow { image_id: rec[0].to_string(), branch, level, values });
    }
    Ok(rows)
}

/// L2-regularised logistic regression on standardised features, trained by
/// full-batch gradient descent. Label 1 = thermal.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

pub const PROBE_STEPS: usize = 500;
pub const PROBE_LR: f64 = 0.5;
pub const PROBE_L2: f64 = 1e-3;

fn label(r: &FeatureRow) -> f64 {
    matches!(r.branch, Branch::Thermal) as u8 as f64
}

impl LinearProbe {
    pub fn fit(rows: &[&FeatureRow]) -> Result<Self> {
        let d = rows.first().ok_or_else(|| Error::InvalidInput("probe needs training rows".into()))?.values.len();
        if rows.iter().any(|r| r.values.len() != d) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(&r.values) {
                *m += v as f64 / n;
            }
        }
        let mut scale = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                scale[j] += (r.values[j] as f64 - mean[j]).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-18 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let xs: Vec<Vec<f64>> = rows.iter().map(|r| (0..d).map(|j| (r.values[j] as f64 - mean[j]) * scale[j]).collect()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| label(r)).collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..PROBE_STEPS {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (x, &y) in xs.iter().zip(&ys) {
                let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                let e = 1.0 / (1.0 + (-z).exp()) - y;
                gb += e / n;
                for j in 0..d {
                    gw[j] += e * x[j] / n;
                }
            }
            for j in 0..d {
                w[j] -= PROBE_LR * (gw[j] + PROBE_L2 * w[j]);
            }
            b -= PROBE_LR * gb;
        }
        Ok(Self { mean, scale, w, b })
    }

    pub fn predict(&self, values: &[f32]) -> bool {
        let z = self.b + values.iter().enumerate().map(|(j, &v)| (v as f64 - self.mean[j]) * self.scale[j] * self.w[j]).sum::<f64>();
        z >= 0.0
    }

    pub fn accuracy(&self, rows: &[&FeatureRow]) -> f64 {
        let ok = rows.iter().filter(|r| self.predict(&r.values) == (label(r) == 1.0)).count();
        ok as f64 / rows.len().max(1) as f64
    }
}

/// Held-out accuracy of one probe per pyramid level, trained on `train`
/// rows and scored on `test` rows. Index 0 = level 1.
pub fn probe_per_level(train: &[FeatureRow], test: &[FeatureRow]) -> Result<[f64; NUM_LEVELS]> {
    let mut out = [0.0; NUM_LEVELS];
    for (f, acc) in out.iter_mut().enumerate() {
        let tr: Vec<&FeatureRow> = train.iter().filter(|r| r.level == f + 1).collect();
        let te: Vec<&FeatureRow> = test.iter().filter(|r| r.level == f + 1).collect();
        if te.is_empty() {
            return Err(Error::InvalidInput(format!("no held-out rows at level {}", f + 1)));
        }
        *acc = LinearProbe::fit(&tr)?.accuracy(&te);
    }
    Ok(out)
}

/// Splits rows by image id so no image contributes to both sides.
pub fn split_by_image(rows: &[FeatureRow], test_fraction: f64, seed: u64) -> (Vec<FeatureRow>, Vec<FeatureRow>) {
    let mut ids: Vec<&str> = rows.iter().map(|r| r.image_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((ids.len() as f64 * test_fraction).round() as usize).clamp(1.min(ids.len()), ids.len());
    let test: BTreeSet<&str> = ids[..n_test].iter().copied().collect();
    rows.iter().cloned().partition(|r| !test.contains(r.image_id.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::image::Image;

    fn row(id: &str, branch: Branch, level: usize, values: Vec<f32>) -> FeatureRow {
        FeatureRow { image_id: id.into(), branch, level, values }
    }

    #[test]
    fn export_shape_and_csv_round_trip() {
        let det = Detector::new(DetectorConfig { widths: [4, 4, 8, 8], fpn_channels: 6, ..Default::default() });
        let store = det.init(&mut ChaCha8Rng::seed_from_u64(0));
        let pair = ImagePair::new(Image::filled(3, 64, 64, 0.3), Image::filled(1, 64, 64, 0.6)).unwrap();
        let pairs = vec![("a".to_string(), pair.clone()), ("b".to_string(), pair)];
        let rows = export_features(&det, &store, &pairs).unwrap();
        assert_eq!(rows.len(), 2 * 5 * 2);
        assert!(rows.iter().all(|r| r.values.len() == 6));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        write_feature_csv(&p, &rows).unwrap();
        assert_eq!(read_feature_csv(&p).unwrap(), rows);
    }

    #[test]
    fn foreground_pooling_with_full_mask_equals_plain_pooling() {
        let det = Detector::new(DetectorConfig { widths: [4, 4, 8, 8], fpn_channels: 6, ..Default::default() });
        let store = det.init(&mut ChaCha8Rng::seed_from_u64(1));
        // Uniformly bright RGB: every pixel is a foreground marker.
        let pair = ImagePair::new(Image::filled(3, 64, 64, 0.9), Image::filled(1, 64, 64, 0.6)).unwrap();
        let a = pooled_rows(&det, &store, "x", &pair).unwrap();
        let b = foreground_pooled_rows(&det, &store, "x", &pair).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (va, vb) in ra.values.iter().zip(&rb.values) {
                assert!((va - vb).abs() < 1e-5, "{va} vs {vb}");
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_vectors() {
        let det = Detector::new(DetectorConfig { widths: [4, 4, 8, 8], fpn_channels: 6, ..Default::default() });
        let mut store = det.init(&mut ChaCha8Rng::seed_from_u64(0));
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            let t = store.get_mut(&n).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let pair = ImagePair::new(Image::filled(3, 64, 64, 0.3), Image::filled(1, 64, 64, 0.6)).unwrap();
        let rows = pooled_rows(&det, &store, "z", &pair).unwrap();
        assert!(rows.iter().all(|r| r.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn probe_separates_shifted_clusters_and_not_identical_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = Vec::new();
        for i in 0..60 {
            let id = format!("i{i}");
            for f in 1..=NUM_LEVELS {
                let noise = |rng: &mut ChaCha8Rng| (0..4).map(|_| crate::nn::sample_normal(rng)).collect::<Vec<f32>>();
                let r = noise(&mut rng);
                let mut t = noise(&mut rng);
                t[0] += 6.0;
                rows.push(row(&id, Branch::Rgb, f, r));
                rows.push(row(&id, Branch::Thermal, f, t));
            }
        }
        let (tr, te) = split_by_image(&rows, 0.25, 0);
        assert!(probe_per_level(&tr, &te).unwrap().iter().all(|&a| a > 0.9));
        // Same distribution for both branches.
        let same: Vec<FeatureRow> = rows
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if matches!(r.branch, Branch::Thermal) {
                    r.values[0] -= 6.0;
                }
                r
            })
            .collect();
        let (tr, te) = split_by_image(&same, 0.25, 0);
        let acc = probe_per_level(&tr, &te).unwrap();
        assert!(acc.iter().sum::<f64>() / 5.0 < 0.7, "{acc:?}");
    }

    #[test]
    fn split_keeps_images_whole() {
        let rows: Vec<FeatureRow> = (0..10).flat_map(|i| [row(&i.to_string(), Branch::Rgb, 1, vec![0.0]), row(&i.to_string(), Branch::Thermal, 1, vec![0.0])]).collect();
        let (tr, te) = split_by_image(&rows, 0.3, 1);
        assert_eq!(te.len(), 6);
        let te_ids: BTreeSet<_> = te.iter().map(|r| r.image_id.clone()).collect();
        assert!(tr.iter().all(|r| !te_ids.contains(&r.image_id)));
    }
}
