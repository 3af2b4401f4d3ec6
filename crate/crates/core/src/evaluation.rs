//! Detection metrics: greedy IoU matching, AP50, AR100 and the rate at which
//! shadowed ("difficult") crowns are found in background regions.
//!
//! Conventions: predictions are ranked by descending score with ties broken
//! by input order (stable sort); AP uses all-point interpolation over the
//! pooled ranking; AR averages recall over IoU thresholds 0.50:0.05:0.95.
//! Undefined metrics (no ground truth of the relevant kind) are `None`.

use std::fmt::Write as _;

use crate::boxes::BBox;
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::fusion::{infer_pair, InferenceMode, InferenceSetup};
use crate::io::{read_annotations, PairEntry};
use crate::mask_gen::BinaryMask;
use crate::nn::ParamStore;

pub const AP_IOU: f64 = 0.5;
pub const AR_MAX_DETS: usize = 100;
pub const SHADOW_BG_COVERAGE: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    /// Crown hidden in shadow.
    pub difficult: bool,
}

/// IoU of two boxes; zero-area boxes are rejected.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(Error::InvalidInput(format!("degenerate box {bx:?}")));
        }
    }
    Ok(iou_unchecked(a, b))
}

fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let w = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)) as f64;
    let h = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)) as f64;
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let area = |x: &BBox| (x.width() as f64) * (x.height() as f64);
    inter / (area(a) + area(b) - inter)
}

/// Indices of `dets` by descending score, ties in input order.
pub fn rank_by_score(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    idx
}

/// For each prediction (already in ranked order) the GT it claims, if any:
/// the unmatched GT with highest IoU at or above `thr`, lowest index on ties.
pub fn match_detections(preds: &[BBox], gts: &[BBox], thr: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let v = iou_unchecked(p, g);
                if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            best.map(|(j, _)| {
                taken[j] = true;
                j
            })
        })
        .collect()
}

fn ranked_boxes(dets: &[Detection], cap: Option<usize>) -> Vec<(BBox, f32)> {
    let mut order = rank_by_score(dets);
    if let Some(c) = cap {
        order.truncate(c);
    }
    order.into_iter().map(|i| (dets[i].bbox, dets[i].score)).collect()
}

/// AP at IoU 0.5 (percent) over all images pooled.
pub fn ap50(preds: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>]) -> Option<f64> {
    assert_eq!(preds.len(), gts.len(), "one prediction list per image");
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return None;
    }
    let mut scored: Vec<(f32, bool)> = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        let ranked = ranked_boxes(p, None);
        let boxes: Vec<BBox> = ranked.iter().map(|r| r.0).collect();
        let gt_boxes: Vec<BBox> = g.iter().map(|x| x.bbox).collect();
        for (m, (_, s)) in match_detections(&boxes, &gt_boxes, AP_IOU).into_iter().zip(&ranked) {
            scored.push((*s, m.is_some()));
        }
    }
    // Stable: equal scores keep image-then-rank order.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(scored.len());
    for (k, &(_, hit)) in scored.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / total_gt as f64, tp as f64 / (k + 1) as f64));
    }
    Some(100.0 * all_point_area(&points))
}

/// Area under the precision envelope for `(recall, precision)` points in
/// rank order.
fn all_point_area(points: &[(f64, f64)]) -> f64 {
    let mut envelope = vec![0.0f64; points.len()];
    let mut best = 0.0f64;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].1);
        envelope[i] = best;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            area += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
    }
    area
}

pub fn ar_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Recall averaged over IoU 0.50:0.05:0.95 with at most 100 detections per
/// image (percent).
pub fn ar100(preds: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>]) -> Option<f64> {
    assert_eq!(preds.len(), gts.len(), "one prediction list per image");
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return None;
    }
    let thresholds = ar_thresholds();
    let mut sum = 0.0;
    for &t in &thresholds {
        let mut matched = 0usize;
        for (p, g) in preds.iter().zip(gts) {
            let boxes: Vec<BBox> = ranked_boxes(p, Some(AR_MAX_DETS)).into_iter().map(|r| r.0).collect();
            let gt_boxes: Vec<BBox> = g.iter().map(|x| x.bbox).collect();
            matched += match_detections(&boxes, &gt_boxes, t).iter().filter(|m| m.is_some()).count();
        }
        sum += matched as f64 / total_gt as f64;
    }
    Some(100.0 * sum / thresholds.len() as f64)
}

/// Fraction of `b` covered by background pixels, treating pixel `(y, x)` as
/// the unit square `[x, x+1] x [y, y+1]`. The box is clipped to the mask.
pub fn background_coverage(b: &BBox, bg_mask: &BinaryMask) -> f64 {
    let (h, w) = bg_mask.dims();
    let c = b.clipped(w as f32, h as f32);
    let area = (c.width().max(0.0) as f64) * (c.height().max(0.0) as f64);
    if area <= 0.0 {
        return 0.0;
    }
    let (x0, x1) = (c.xmin.floor() as usize, (c.xmax.ceil() as usize).min(w));
    let (y0, y1) = (c.ymin.floor() as usize, (c.ymax.ceil() as usize).min(h));
    let mut covered = 0.0f64;
    for y in y0..y1 {
        let oy = (c.ymax as f64).min(y as f64 + 1.0) - (c.ymin as f64).max(y as f64);
        if oy <= 0.0 {
            continue;
        }
        for x in x0..x1 {
            if bg_mask.is_foreground(y, x) {
                continue;
            }
            let ox = (c.xmax as f64).min(x as f64 + 1.0) - (c.xmin as f64).max(x as f64);
            if ox > 0.0 {
                covered += ox * oy;
            }
        }
    }
    covered / area
}

/// Whose area the background-coverage rule is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CoverageBasis {
    /// Fraction of the matched prediction's box.
    #[default]
    Prediction,
    /// Fraction of the difficult ground-truth box.
    GroundTruth,
}

/// Counts for one image: (difficult GTs found in background, difficult GTs).
pub fn shadowed_counts(preds: &[Detection], gts: &[GroundTruthBox], bg_mask: &BinaryMask) -> (usize, usize) {
    shadowed_counts_with(preds, gts, bg_mask, CoverageBasis::Prediction)
}

pub fn shadowed_counts_with(preds: &[Detection], gts: &[GroundTruthBox], bg_mask: &BinaryMask, basis: CoverageBasis) -> (usize, usize) {
    let ranked = ranked_boxes(preds, None);
    let boxes: Vec<BBox> = ranked.iter().map(|r| r.0).collect();
    let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    let matches = match_detections(&boxes, &gt_boxes, AP_IOU);
    let mut hits = 0;
    for (pi, m) in matches.iter().enumerate() {
        if let Some(g) = *m {
            let measured = match basis {
                CoverageBasis::Prediction => &boxes[pi],
                CoverageBasis::GroundTruth => &gts[g].bbox,
            };
            if gts[g].difficult && background_coverage(measured, bg_mask) >= SHADOW_BG_COVERAGE {
                hits += 1;
            }
        }
    }
    (hits, gts.iter().filter(|g| g.difficult).count())
}

/// Percentage of difficult GTs claimed by a prediction that lies at least
/// 85% in background.
pub fn shadowed_detection_rate(preds: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], bg_masks: &[BinaryMask]) -> Option<f64> {
    shadowed_detection_rate_with(preds, gts, bg_masks, CoverageBasis::Prediction)
}

pub fn shadowed_detection_rate_with(
    preds: &[Vec<Detection>],
    gts: &[Vec<GroundTruthBox>],
    bg_masks: &[BinaryMask],
    basis: CoverageBasis,
) -> Option<f64> {
    assert!(preds.len() == gts.len() && gts.len() == bg_masks.len());
    let (mut hits, mut total) = (0, 0);
    for ((p, g), m) in preds.iter().zip(gts).zip(bg_masks) {
        let (h, t) = shadowed_counts_with(p, g, m, basis);
        hits += h;
        total += t;
    }
    (total > 0).then(|| 100.0 * hits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub image_id: String,
    pub num_gt: usize,
    pub num_difficult: usize,
    pub num_pred: usize,
    pub true_positives: usize,
    pub shadowed_hits: usize,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: InferenceMode,
    pub ap50: Option<f64>,
    pub ar100: Option<f64>,
    pub shadowed_rate: Option<f64>,
    pub images: Vec<ImageResult>,
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "NaN".to_string(),
    }
}

impl EvalReport {
    /// Metrics from precomputed detections and background masks.
    pub fn from_parts(
        mode: InferenceMode,
        ids: Vec<String>,
        preds: Vec<Vec<Detection>>,
        gts: &[Vec<GroundTruthBox>],
        bg_masks: &[BinaryMask],
    ) -> Self {
        Self::from_parts_with(mode, ids, preds, gts, bg_masks, CoverageBasis::Prediction)
    }

    pub fn from_parts_with(
        mode: InferenceMode,
        ids: Vec<String>,
        preds: Vec<Vec<Detection>>,
        gts: &[Vec<GroundTruthBox>],
        bg_masks: &[BinaryMask],
        basis: CoverageBasis,
    ) -> Self {
        let ap = ap50(&preds, gts);
        let ar = ar100(&preds, gts);
        let sh = shadowed_detection_rate_with(&preds, gts, bg_masks, basis);
        let images = ids
            .into_iter()
            .zip(preds)
            .zip(gts.iter().zip(bg_masks))
            .map(|((image_id, d), (g, m))| {
                let boxes: Vec<BBox> = ranked_boxes(&d, None).into_iter().map(|r| r.0).collect();
                let gb: Vec<BBox> = g.iter().map(|x| x.bbox).collect();
                let tp = match_detections(&boxes, &gb, AP_IOU).iter().filter(|m| m.is_some()).count();
                let (hits, nd) = shadowed_counts_with(&d, g, m, basis);
                ImageResult {
                    image_id,
                    num_gt: g.len(),
                    num_difficult: nd,
                    num_pred: d.len(),
                    true_positives: tp,
                    shadowed_hits: hits,
                    detections: d,
                }
            })
            .collect();
        Self { mode, ap50: ap, ar100: ar, shadowed_rate: sh, images }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let undefined = |v: Option<f64>| if v.is_none() { "  (undefined)" } else { "" };
        let _ = writeln!(s, "mode: {}", self.mode.as_str());
        let _ = writeln!(s, "images: {}", self.images.len());
        let _ = writeln!(s, "gt boxes: {}", self.images.iter().map(|i| i.num_gt).sum::<usize>());
        let _ = writeln!(s, "difficult boxes: {}", self.images.iter().map(|i| i.num_difficult).sum::<usize>());
        let _ = writeln!(s, "AP50 (%): {}{}", fmt_metric(self.ap50), undefined(self.ap50));
        let _ = writeln!(s, "AR100 (%): {}{}", fmt_metric(self.ar100), undefined(self.ar100));
        let _ = writeln!(s, "shadowed rate (%): {}{}", fmt_metric(self.shadowed_rate), undefined(self.shadowed_rate));
        s
    }

    /// Summary row followed by the per-image match table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "mode,{}", self.mode.as_str());
        let _ = writeln!(s, "ap50,{}", fmt_metric(self.ap50));
        let _ = writeln!(s, "ar100,{}", fmt_metric(self.ar100));
        let _ = writeln!(s, "shadowed_rate,{}", fmt_metric(self.shadowed_rate));
        s.push_str("\nimage_id,num_gt,num_difficult,num_pred,true_positives,shadowed_hits\n");
        for i in &self.images {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                i.image_id, i.num_gt, i.num_difficult, i.num_pred, i.true_positives, i.shadowed_hits
            );
        }
        s
    }
}

/// Runs inference over annotated pairs and scores it.
pub fn evaluate(setup: &InferenceSetup, store: &ParamStore, entries: &[PairEntry], mode: InferenceMode) -> Result<EvalReport> {
    evaluate_with(setup, store, entries, mode, CoverageBasis::Prediction)
}

pub fn evaluate_with(
    setup: &InferenceSetup,
    store: &ParamStore,
    entries: &[PairEntry],
    mode: InferenceMode,
    basis: CoverageBasis,
) -> Result<EvalReport> {
    let mut ids = Vec::with_capacity(entries.len());
    let mut preds = Vec::with_capacity(entries.len());
    let mut gts = Vec::with_capacity(entries.len());
    let mut masks = Vec::with_capacity(entries.len());
    for e in entries {
        let ann = e.annotations.as_ref().ok_or_else(|| Error::Pair {
            pair_id: e.id.clone(),
            message: "manifest row has no annotation path".into(),
        })?;
        let mut by_id = read_annotations(ann)?;
        let pair = e.load()?;
        let out = infer_pair(setup, store, &pair, mode)?;
        ids.push(e.id.clone());
        preds.push(out.detections);
        gts.push(by_id.remove(&e.id).unwrap_or_default());
        masks.push(out.bg_mask);
    }
    Ok(EvalReport::from_parts_with(mode, ids, preds, &gts, &masks, basis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask_gen::Polarity;
    use proptest::prelude::*;

    fn b(x0: f32, y0: f32, x1: f32, y1: f32) -> BBox {
        BBox::new(x0, y0, x1, y1)
    }

    fn d(bx: BBox, score: f32) -> Detection {
        Detection { bbox: bx, score }
    }

    fn gt(bx: BBox, difficult: bool) -> GroundTruthBox {
        GroundTruthBox { bbox: bx, difficult }
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert!(iou(&a, &b(1.0, 1.0, 1.0, 3.0)).is_err());
    }

    #[test]
    fn matching_is_one_to_one() {
        let g = [b(0.0, 0.0, 10.0, 10.0)];
        assert_eq!(match_detections(&[b(0.0, 0.0, 10.0, 6.0)], &g, 0.5), vec![Some(0)]);
        let two = [b(0.0, 0.0, 10.0, 10.0), b(1.0, 0.0, 10.0, 10.0)];
        assert_eq!(match_detections(&two, &g, 0.5), vec![Some(0), None]);
    }

    #[test]
    fn ap_examples() {
        let g = vec![vec![gt(b(0.0, 0.0, 10.0, 10.0), false), gt(b(20.0, 20.0, 30.0, 30.0), false)]];
        let perfect = vec![g[0].iter().map(|x| d(x.bbox, 0.9)).collect()];
        assert_eq!(ap50(&perfect, &g), Some(100.0));
        let half = vec![vec![d(b(0.0, 0.0, 10.0, 10.0), 0.9), d(b(50.0, 50.0, 60.0, 60.0), 0.8)]];
        assert!((ap50(&half, &g).unwrap() - 50.0).abs() < 1e-12);
        assert_eq!(ap50(&[vec![]], &g), Some(0.0));
        assert_eq!(ap50(&[vec![]], &[vec![]]), None);
    }

    #[test]
    fn ar_examples() {
        let g = vec![vec![gt(b(0.0, 0.0, 10.0, 10.0), false)]];
        assert!((ar100(&[vec![d(b(0.0, 0.0, 10.0, 10.0), 0.5)]], &g).unwrap() - 100.0).abs() < 1e-9);
        // IoU 0.52: only the 0.50 threshold matches.
        let p = vec![vec![d(b(0.0, 0.0, 10.0, 5.2), 0.5)]];
        assert!((ar100(&p, &g).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(ar100(&[vec![]], &g), Some(0.0));
    }

    #[test]
    fn shadowed_rate_examples() {
        // Left half background, right half foreground.
        let bits: Vec<u8> = (0..100).map(|i| ((i % 10) < 5) as u8).collect();
        let m = BinaryMask::new(10, 10, bits, Polarity::BackgroundOne).unwrap();
        let g = vec![vec![gt(b(0.0, 0.0, 4.0, 4.0), true)]];
        assert_eq!(shadowed_detection_rate(&[vec![d(b(0.0, 0.0, 4.0, 4.0), 0.9)]], &g, &[m.clone()]), Some(100.0));
        let g2 = vec![vec![gt(b(3.0, 0.0, 7.0, 4.0), true)]];
        let half = vec![vec![d(b(3.0, 0.0, 7.0, 4.0), 0.9)]];
        assert!((background_coverage(&half[0][0].bbox, &m) - 0.5).abs() < 1e-12);
        assert_eq!(shadowed_detection_rate(&half, &g2, &[m.clone()]), Some(0.0));
        let visible = vec![vec![gt(b(0.0, 0.0, 4.0, 4.0), false)]];
        assert_eq!(shadowed_detection_rate(&[vec![]], &visible, &[m.clone()]), None);

        // Prediction mostly in BG, GT straddling the boundary: bases disagree.
        let g3 = [gt(b(1.0, 0.0, 6.0, 4.0), true)];
        let p3 = [d(b(0.0, 0.0, 5.0, 4.0), 0.9)];
        assert_eq!(shadowed_counts_with(&p3, &g3, &m, CoverageBasis::Prediction), (1, 1));
        assert_eq!(shadowed_counts_with(&p3, &g3, &m, CoverageBasis::GroundTruth), (0, 1));
    }

    #[test]
    fn report_formats() {
        let m = BinaryMask::filled(8, 8, 1, Polarity::BackgroundOne);
        let g = vec![vec![gt(b(0.0, 0.0, 4.0, 4.0), true)]];
        let r = EvalReport::from_parts(InferenceMode::Fused, vec!["a".into()], vec![vec![d(b(0.0, 0.0, 4.0, 4.0), 0.7)]], &g, &[m]);
        assert_eq!(r.shadowed_rate, Some(100.0));
        assert!(r.to_text().contains("AP50 (%): 100.0000"));
        assert!(r.to_csv().contains("a,1,1,1,1,1"));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f32..20.0, 0.0f32..20.0, 1.0f32..10.0, 1.0f32..10.0).prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn adding_top_true_positive_never_hurts(
            gts in proptest::collection::vec(arb_box(), 1..5),
            preds in proptest::collection::vec((arb_box(), 0.0f32..0.9), 0..5),
        ) {
            // The first GT sits where no existing prediction can reach it.
            let far = b(100.0, 100.0, 108.0, 108.0);
            let mut gts = gts;
            gts[0] = far;
            let g: Vec<Vec<GroundTruthBox>> = vec![gts.iter().map(|&x| gt(x, false)).collect()];
            let p: Vec<Detection> = preds.iter().map(|&(x, s)| d(x, s)).collect();
            let before_ap = ap50(&[p.clone()], &g).unwrap();
            let before_ar = ar100(&[p.clone()], &g).unwrap();
            let mut q = vec![d(gts[0], 1.0)];
            q.extend(p.clone());
            prop_assert!(ap50(&[q.clone()], &g).unwrap() >= before_ap - 1e-9);
            prop_assert!(ar100(&[q], &g).unwrap() >= before_ar - 1e-9);
            for v in [before_ap, before_ar] {
                prop_assert!((0.0..=100.0).contains(&v));
            }
        }

        #[test]
        fn equal_score_permutation(perm_seed in 0u64..1000) {
            let g = vec![vec![gt(b(0.0, 0.0, 10.0, 10.0), false), gt(b(30.0, 0.0, 40.0, 10.0), false)]];
            let mut p = vec![d(b(0.0, 0.0, 10.0, 10.0), 0.5), d(b(30.0, 0.0, 40.0, 10.0), 0.5), d(b(60.0, 0.0, 70.0, 10.0), 0.4)];
            if perm_seed % 2 == 1 {
                p.swap(0, 1);
            }
            prop_assert!((ap50(&[p], &g).unwrap() - 100.0).abs() < 1e-9);
        }
    }
}
