//! Writes a small train/val/test synthetic dataset and audits it.
//!
//! `cargo run --example synthetic_dataset [out_dir]`

use std::collections::BTreeSet;
use std::path::PathBuf;

use shadowsense::io::{read_annotations, read_manifest};
use shadowsense::synthdata::{generate_dataset, SceneSpec, SplitCounts};

fn main() -> shadowsense::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("shadowsense-synth"));
    let spec = SceneSpec { shadow_fraction: 0.3, ..SceneSpec::small() };
    let manifests = generate_dataset(&spec, SplitCounts { train: 20, val: 5, test: 10 }, &out, true)?;
    let mut seen = BTreeSet::new();
    for split in ["train", "val", "test"] {
        let entries = read_manifest(manifests.split(split).expect("split"))?;
        let (mut boxes, mut difficult) = (0, 0);
        for e in &entries {
            let ann = read_annotations(e.annotations.as_ref().expect("annotated"))?;
            for b in ann.values().flatten() {
                boxes += 1;
                difficult += b.difficult as usize;
            }
            let bytes = std::fs::read(&e.rgb).map_err(|err| shadowsense::Error::InvalidInput(err.to_string()))?;
            assert!(seen.insert(bytes), "duplicate image across splits");
        }
        println!("{split:>5}: {} pairs, {boxes} crowns, {difficult} shadowed", entries.len());
    }
    println!("dataset at {}", out.display());
    Ok(())
}
