//! Exports pooled pyramid features for both branches and measures how well
//! a linear probe tells the modalities apart.
//!
//! `cargo run --example feature_probe [checkpoint_dir]`

use shadowsense::features::{export_features, probe_per_level, split_by_image, write_feature_csv};
use shadowsense::synthdata::{generate_split, SceneSpec};
use shadowsense::trainer::{CheckpointBundle, Model, TrainConfig};

fn main() -> shadowsense::Result<()> {
    let (model, _) = match std::env::args().nth(1) {
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
    let scenes = generate_split(&SceneSpec::small(), 2, 40)?;
    let pairs: Vec<_> = scenes.into_iter().enumerate().map(|(i, s)| (format!("s{i}"), s.pair)).collect();
    let rows = export_features(&model.detector, &model.store, &pairs)?;
    println!("{} rows ({} images x 2 branches x 5 levels), {} values each", rows.len(), pairs.len(), rows[0].values.len());
    let path = std::env::temp_dir().join("shadowsense-features.csv");
    write_feature_csv(&path, &rows)?;
    println!("wrote {}", path.display());

    let (train, test) = split_by_image(&rows, 0.25, 0);
    let acc = probe_per_level(&train, &test)?;
    println!("held-out probe accuracy per level: {:?}", acc.map(|a| (a * 1000.0).round() / 1000.0));
    println!("mean: {:.3}", acc.iter().sum::<f64>() / acc.len() as f64);
    Ok(())
}
