//! Checkpoint bundles: save/load round trip and importing RGB weights into
//! a fresh model through a name mapping.
//!
//! `cargo run --example checkpoint_import`

use shadowsense::optim::Adam;
use shadowsense::trainer::{import_params, CheckpointBundle, Model, TrainConfig};

fn main() -> shadowsense::Result<()> {
    let dir = tempfile_dir();
    let mut cfg = TrainConfig::default();
    cfg.detector.fpn_channels = 16;
    let source = Model::new(&cfg, 1);
    source.bundle(&Adam::new(), 0, &cfg).save(&dir.join("a"))?;
    let loaded = CheckpointBundle::load(&dir.join("a"))?;
    loaded.save(&dir.join("b"))?;
    for f in ["index.txt", "tensors.bin", "config.txt", "meta.txt"] {
        let same = std::fs::read(dir.join("a").join(f)).ok() == std::fs::read(dir.join("b").join(f)).ok();
        println!("{f}: byte-identical after reload = {same}");
    }

    let mut target = Model::new(&cfg, 2);
    let n = import_params(&mut target.store, &loaded.params, "rgb.* = rgb.*\nhead.* = head.*\n")?;
    target.detector.sync_thermal_from_rgb(&mut target.store);
    println!("imported {n} arrays; RGB checksums match: {}", target.store.checksum("rgb.") == source.store.checksum("rgb."));
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("shadowsense-ckpt-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}
