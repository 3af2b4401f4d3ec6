//! Inference in the three modes on one scene, plus the fusion identities.
//!
//! `cargo run --example fused_inference`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shadowsense::detector::{Branch, Detector, DetectorConfig, PostprocessConfig};
use shadowsense::fusion::{fuse_pyramid, infer_pair, FusionWeights, InferenceMode, InferenceSetup};
use shadowsense::mask_gen::{generate_level_masks, Polarity};
use shadowsense::synthdata::{generate_scene, SceneSpec};

fn main() -> shadowsense::Result<()> {
    let scene = generate_scene(&SceneSpec { seed: 3, ..SceneSpec::small() })?;
    let detector = Detector::new(DetectorConfig { fpn_channels: 32, ..Default::default() });
    let mut store = detector.init(&mut ChaCha8Rng::seed_from_u64(0));
    // Perturb the thermal branch so the two pyramids differ.
    store.get_mut("thermal.pre.w")?.data_mut()[0] = 0.5;

    let (_, rgb) = detector.extract_image(&store, Branch::Rgb, &scene.pair.rgb)?;
    let (_, thermal) = detector.extract_image(&store, Branch::Thermal, &scene.pair.thermal)?;
    let masks: Vec<Vec<_>> = generate_level_masks(&scene.pair.rgb, &rgb.dims(), Polarity::BackgroundOne)?.into_iter().map(|m| vec![m]).collect();

    let w = FusionWeights::default();
    println!("lambda_T = {}, per-level thermal weight: {:?}", w.lambda_t, (0..5).map(|f| w.level_weight(f)).collect::<Vec<_>>());
    let fused = fuse_pyramid(&rgb, &thermal, &masks, &w)?;
    // Foreground positions keep RGB features bit for bit.
    let (m, r, f) = (&masks[0][0], &rgb.levels[0], &fused.levels[0]);
    let hw = m.bits().len();
    let fg_equal = (0..r.len()).all(|i| m.bits()[i % hw] == 1 || r.data()[i].to_bits() == f.data()[i].to_bits());
    println!("level-1 FG features equal RGB: {fg_equal}");

    for lambda_t in [0.0, 5.0] {
        let setup = InferenceSetup { detector: detector.clone(), fusion: FusionWeights::new(lambda_t, w.eta)?, post: PostprocessConfig::default() };
        for mode in [InferenceMode::RgbOnly, InferenceMode::ThermalOnly, InferenceMode::Fused] {
            let out = infer_pair(&setup, &store, &scene.pair, mode)?;
            println!("lambda_T {lambda_t}: {:>12} -> {} detections", mode.as_str(), out.detections.len());
        }
    }
    Ok(())
}
