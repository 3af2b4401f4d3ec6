//! The two-branch detector: pyramid shapes, anchors per level, and NMS.
//!
//! `cargo run --example detector_anatomy`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shadowsense::boxes::BBox;
use shadowsense::detector::{nms, Branch, Detection, Detector, DetectorConfig, PostprocessConfig};
use shadowsense::synthdata::{generate_scene, SceneSpec};

fn main() -> shadowsense::Result<()> {
    let cfg = DetectorConfig::default();
    let det = Detector::new(cfg.clone());
    let store = det.init(&mut ChaCha8Rng::seed_from_u64(0));
    let scene = generate_scene(&SceneSpec::default())?;
    let (h, w) = scene.pair.dims();

    let (c, pyr) = det.extract_image(&store, Branch::Rgb, &scene.pair.rgb)?;
    println!("extractor C3/C4/C5: {:?}", c.levels().map(|t| t.shape().to_vec()));
    let anchors = det.anchors(h, w);
    for (f, t) in pyr.levels.iter().enumerate() {
        let a = anchors.level(f);
        println!("level {}: {:?}, {} anchors, first anchor {:?}", f + 1, t.shape(), a.len(), a[0].bbox());
    }
    let (_, tpyr) = det.extract_image(&store, Branch::Thermal, &scene.pair.thermal)?;
    println!("thermal pyramid level-1 shape {:?}", tpyr.levels[0].shape());

    let post = PostprocessConfig::default();
    println!("untrained RGB detections: {}", det.detect(&store, &pyr, (h, w), &post)?.len());

    let d = |x0: f32, score: f32| Detection { bbox: BBox::new(x0, 0.0, x0 + 10.0, 10.0), score };
    let kept = nms(vec![d(0.0, 0.9), d(1.0, 0.8), d(30.0, 0.7)], post.nms_threshold, 100);
    println!("NMS at IoU {}: kept scores {:?}", post.nms_threshold, kept.iter().map(|k| k.score).collect::<Vec<_>>());
    Ok(())
}
