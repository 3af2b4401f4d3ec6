//! Source pretraining of the RGB branch, then self-supervised adaptation of
//! the thermal branch on unlabeled pairs, with a checkpoint at the end.
//!
//! `cargo run --release --example adapt_thermal [out_dir]`
//! (ITERS / PAIRS environment variables scale the run.)

use std::path::PathBuf;

use shadowsense::synthdata::{generate_split, SceneSpec};
use shadowsense::trainer::{discriminator_accuracy, format_log, prepare_pairs, pretrain, train, MaskCache, Model, TrainConfig};

fn env(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> shadowsense::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("shadowsense-adapt"));
    let spec = SceneSpec { shadow_fraction: 0.3, ..SceneSpec::small() };
    let scenes = generate_split(&spec, 0, env("PAIRS", 48))?;

    let mut cfg = TrainConfig { iterations: env("ITERS", 60), pretrain_iterations: env("PRETRAIN", 150), batch_size: 8, ..Default::default() };
    cfg.detector.fpn_channels = 32;
    let mut model = Model::new(&cfg, cfg.seed);

    let labelled: Vec<_> = scenes.iter().map(|s| (s.pair.rgb.clone(), s.annotations.clone())).collect();
    let src = pretrain(&mut model, &cfg, &labelled)?;
    println!("source loss: cls {:.4} -> {:.4}", src[0].cls, src.last().unwrap().cls);

    // Adaptation sees only the image pairs.
    let pairs: Vec<_> = scenes.iter().enumerate().map(|(i, s)| (format!("p{i}"), s.pair.clone())).collect();
    let training = prepare_pairs(&model, &cfg, &pairs, &MaskCache::default())?;
    let rgb_before = model.store.checksum("rgb.");
    let outcome = train(&mut model, &training, &cfg, Some(&out))?;
    assert_eq!(model.store.checksum("rgb."), rgb_before, "RGB branch must stay frozen");

    let log = format_log(&outcome.log);
    for line in log.lines().take(3).chain(log.lines().last()) {
        println!("{line}");
    }
    println!("discriminator accuracy on training pairs: {:.3}", discriminator_accuracy(&model, &training)?);
    println!("checkpoint and train_log.csv in {}", out.display());
    Ok(())
}
