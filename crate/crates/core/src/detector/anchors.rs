use crate::boxes::BBox;

use super::DetectorConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl Anchor {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// Anchors for every pyramid level, ordered to match the head output layout:
/// index `a * H * W + y * W + x` for aspect ratio `a` at cell `(y, x)`.
#[derive(Clone, Debug)]
pub struct AnchorGrid {
    levels: Vec<Vec<Anchor>>,
    dims: Vec<(usize, usize)>,
}

impl AnchorGrid {
    pub fn new(cfg: &DetectorConfig, height: usize, width: usize) -> Self {
        let dims = cfg.level_dims(height, width);
        let levels = cfg
            .convention
            .strides()
            .iter()
            .zip(&dims)
            .map(|(&stride, &(h, w))| {
                let size = cfg.anchor_scale * stride as f32;
                let mut v = Vec::with_capacity(h * w * cfg.aspect_ratios.len());
                for &ratio in &cfg.aspect_ratios {
                    let aw = size / ratio.sqrt();
                    let ah = size * ratio.sqrt();
                    for y in 0..h {
                        for x in 0..w {
                            v.push(Anchor {
                                cx: (x as f32 + 0.5) * stride as f32,
                                cy: (y as f32 + 0.5) * stride as f32,
                                w: aw,
                                h: ah,
                            });
                        }
                    }
                }
                v
            })
            .collect();
        Self { levels, dims }
    }

    pub fn level(&self, i: usize) -> &[Anchor] {
        &self.levels[i]
    }

    pub fn level_dims(&self, i: usize) -> (usize, usize) {
        self.dims[i]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

const MAX_LOG_SCALE: f32 = 4.135_167; // ln(1000 / 16)

/// Box to regression target `(dx, dy, dw, dh)` relative to an anchor.
pub fn encode(anchor: &Anchor, b: &BBox) -> [f32; 4] {
    let (cx, cy) = b.center();
    [
        (cx - anchor.cx) / anchor.w,
        (cy - anchor.cy) / anchor.h,
        (b.width() / anchor.w).ln(),
        (b.height() / anchor.h).ln(),
    ]
}

pub fn decode(anchor: &Anchor, d: [f32; 4]) -> BBox {
    let cx = anchor.cx + d[0] * anchor.w;
    let cy = anchor.cy + d[1] * anchor.h;
    let w = anchor.w * d[2].min(MAX_LOG_SCALE).exp();
    let h = anchor.h * d[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let a = Anchor { cx: 10.0, cy: 12.0, w: 16.0, h: 20.0 };
        let b = BBox::new(3.0, 4.0, 21.0, 30.0);
        let back = decode(&a, encode(&a, &b));
        for (x, y) in [(back.xmin, b.xmin), (back.ymin, b.ymin), (back.xmax, b.xmax), (back.ymax, b.ymax)] {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn anchor_layout_and_centers() {
        let cfg = DetectorConfig::default();
        let g = AnchorGrid::new(&cfg, 64, 64);
        assert_eq!(g.level_dims(0), (16, 16));
        let first = g.level(0)[0];
        assert_eq!((first.cx, first.cy), (2.0, 2.0));
        // Second aspect ratio block starts after H*W anchors.
        let second = g.level(0)[256];
        assert_eq!((second.cx, second.cy), (2.0, 2.0));
        assert!((second.w - 16.0).abs() < 1e-6);
    }
}
