//! Detection metrics on hand-made cases and on a synthetic test split.
//!
//! `cargo run --example evaluate_modes [checkpoint_dir]`
//! Without a checkpoint an untrained detector is scored (metrics near zero).

use shadowsense::boxes::BBox;
use shadowsense::detector::Detection;
use shadowsense::evaluation::{ap50, ar100, iou, EvalReport, GroundTruthBox};
use shadowsense::fusion::{infer_pair, InferenceMode};
use shadowsense::synthdata::{generate_split, SceneSpec};
use shadowsense::trainer::{CheckpointBundle, Model, TrainConfig};

fn main() -> shadowsense::Result<()> {
    let g = |x0, y0, x1, y1| GroundTruthBox { bbox: BBox::new(x0, y0, x1, y1), difficult: false };
    let d = |x0, y0, x1, y1, score| Detection { bbox: BBox::new(x0, y0, x1, y1), score };
    println!("IoU((0,0,2,2), (1,1,3,3)) = {:.6}", iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 1.0, 3.0, 3.0))?);
    let gts = vec![vec![g(0.0, 0.0, 10.0, 10.0), g(20.0, 20.0, 30.0, 30.0)]];
    let preds = vec![vec![d(0.0, 0.0, 10.0, 10.0, 0.9), d(50.0, 50.0, 60.0, 60.0, 0.8)]];
    println!("hand case AP50 = {:?}", ap50(&preds, &gts));
    let gts1 = vec![vec![g(0.0, 0.0, 10.0, 10.0)]];
    println!("IoU-0.52 prediction AR100 = {:?}", ar100(&[vec![d(0.0, 0.0, 10.0, 19.25, 0.5)]], &gts1));

    let (model, cfg) = match std::env::args().nth(1) {
        Some(dir) => {
            let b = CheckpointBundle::load(&shadowsense::cli::resolve_checkpoint(dir.as_ref())?)?;
            let cfg = TrainConfig::from_map(&b.config)?;
            (Model::from_params(&cfg, b.params)?, cfg)
        }
        None => {
            let mut cfg = TrainConfig::default();
            cfg.detector.fpn_channels = 32;
            (Model::new(&cfg, 0), cfg)
        }
    };
    let test = generate_split(&SceneSpec { shadow_fraction: 0.3, ..SceneSpec::small() }, 2, 10)?;
    let setup = model.inference_setup(&cfg);
    for mode in [InferenceMode::RgbOnly, InferenceMode::ThermalOnly, InferenceMode::Fused] {
        let (mut preds, mut masks) = (Vec::new(), Vec::new());
        for s in &test {
            let r = infer_pair(&setup, &model.store, &s.pair, mode)?;
            preds.push(r.detections);
            masks.push(r.bg_mask);
        }
        let gts: Vec<_> = test.iter().map(|s| s.annotations.clone()).collect();
        let ids = (0..test.len()).map(|i| format!("t{i}")).collect();
        print!("{}", EvalReport::from_parts(mode, ids, preds, &gts, &masks).to_text());
    }
    Ok(())
}
