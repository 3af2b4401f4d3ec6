use crate::autograd::sigmoid;
use crate::error::{Error, Result};

use super::{decode, AnchorGrid, Detection, LevelOutput};

#[derive(Clone, Debug, PartialEq)]
pub struct PostprocessConfig {
    pub score_threshold: f32,
    pub nms_threshold: f32,
    pub max_detections: usize,
    /// Candidates kept per level before NMS.
    pub pre_nms_top_k: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { score_threshold: 0.1, nms_threshold: 0.15, max_detections: 100, pre_nms_top_k: 1000 }
    }
}

/// Greedy NMS over detections; input order breaks score ties.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f32, max_keep: usize) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep.len() >= max_keep {
            break;
        }
        if keep.iter().all(|k| k.bbox.iou(&d.bbox) <= iou_threshold) {
            keep.push(d);
        }
    }
    keep
}

/// Decodes single-image head outputs into scored, clipped, NMS-filtered boxes.
pub fn postprocess(raw: &[LevelOutput], anchors: &AnchorGrid, image_dims: (usize, usize), cfg: &PostprocessConfig) -> Result<Vec<Detection>> {
    if raw.len() != anchors.num_levels() {
        return Err(Error::Shape(format!("{} head outputs for {} anchor levels", raw.len(), anchors.num_levels())));
    }
    let (ih, iw) = (image_dims.0 as f32, image_dims.1 as f32);
    let mut all = Vec::new();
    for (lvl, out) in raw.iter().enumerate() {
        let (n, a, h, w) = out.logits.dims4();
        if n != 1 {
            return Err(Error::Shape("postprocess expects one image at a time".into()));
        }
        let level_anchors = anchors.level(lvl);
        if level_anchors.len() != a * h * w {
            return Err(Error::Shape(format!("level {lvl}: {} anchors for {} logits", level_anchors.len(), a * h * w)));
        }
        let hw = h * w;
        let mut cands: Vec<(f32, usize)> = out
            .logits
            .data()
            .iter()
            .enumerate()
            .map(|(i, &z)| (sigmoid(z), i))
            .filter(|&(s, _)| s >= cfg.score_threshold)
            .collect();
        cands.sort_by(|x, y| y.0.total_cmp(&x.0));
        cands.truncate(cfg.pre_nms_top_k);
        for (score, idx) in cands {
            let (ai, pos) = (idx / hw, idx % hw);
            let d = out.deltas.data();
            let deltas = [0, 1, 2, 3].map(|k| d[(ai * 4 + k) * hw + pos]);
            let bbox = decode(&level_anchors[idx], deltas).clipped(iw, ih);
            if bbox.is_valid() {
                all.push(Detection { bbox, score });
            }
        }
    }
    Ok(nms(all, cfg.nms_threshold, cfg.max_detections))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;

    fn det(x: f32, s: f32) -> Detection {
        Detection { bbox: BBox::new(x, 0.0, x + 10.0, 10.0), score: s }
    }

    #[test]
    fn identical_boxes_keep_highest() {
        let out = nms(vec![det(0.0, 0.8), det(0.0, 0.9)], 0.15, 100);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn disjoint_boxes_all_kept_and_capped() {
        let dets: Vec<_> = (0..150).map(|i| det(i as f32 * 20.0, 0.5 + i as f32 * 1e-3)).collect();
        let out = nms(dets, 0.15, 100);
        assert_eq!(out.len(), 100);
        assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn low_scores_are_dropped() {
        use crate::detector::{AnchorGrid, DetectorConfig};
        use crate::tensor::Tensor;
        let cfg = DetectorConfig { aspect_ratios: vec![1.0], ..Default::default() };
        let grid = AnchorGrid::new(&cfg, 64, 64);
        let raw: Vec<LevelOutput> = (0..5)
            .map(|l| {
                let (h, w) = grid.level_dims(l);
                let mut logits = Tensor::full(&[1, 1, h, w], -10.0);
                if l == 0 {
                    // sigmoid(-2.944) ~ 0.05
                    logits.data_mut()[5] = -2.944;
                }
                LevelOutput { logits, deltas: Tensor::zeros(&[1, 4, h, w]) }
            })
            .collect();
        let out = postprocess(&raw, &grid, (64, 64), &PostprocessConfig::default()).unwrap();
        assert!(out.is_empty());
    }
}
