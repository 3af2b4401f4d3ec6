//! Watershed FG/BG masking of a synthetic RGB scene, stage by stage.
//!
//! `cargo run --example mask_generation [out_dir]`

use std::path::PathBuf;

use shadowsense::mask_gen::{mask_stages, resize_to_levels, Polarity, BG_LABEL, FG_LABEL};
use shadowsense::synthdata::{generate_scene, SceneSpec};

fn main() -> shadowsense::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("shadowsense-mask"));
    let scene = generate_scene(&SceneSpec { seed: 7, ..SceneSpec::default() })?;
    let st = mask_stages(&scene.pair.rgb)?;
    let (h, w) = scene.pair.dims();
    println!("{h}x{w} scene, {} crowns ({} shadowed)", scene.crowns.len(), scene.crowns.iter().filter(|c| c.shadowed).count());
    println!("markers: {} BG, {} FG, {} unmarked", st.markers.count(BG_LABEL), st.markers.count(FG_LABEL), h * w - st.markers.count(BG_LABEL) - st.markers.count(FG_LABEL));
    println!("flooded FG pixels: {}, refined FG pixels: {}", st.flooded.ones(), st.refined.ones());

    // Agreement with the generator's exact BG geometry.
    let bg = st.refined.with_polarity(Polarity::BackgroundOne);
    let agree = bg.bits().iter().zip(scene.gt_bg_mask.bits()).filter(|(a, b)| a == b).count();
    println!("BG agreement with ground truth: {:.2}%", 100.0 * agree as f64 / (h * w) as f64);

    let dims: Vec<(usize, usize)> = [4, 8, 16, 32, 64].iter().map(|s| (h / s, w / s)).collect();
    for (f, m) in resize_to_levels(&st.refined, &dims, Polarity::ForegroundOne)?.iter().enumerate() {
        println!("level {}: {:?}, FG fraction {:.3}", f + 1, m.dims(), m.ones() as f64 / m.bits().len() as f64);
    }

    std::fs::create_dir_all(&out).map_err(|e| shadowsense::Error::InvalidInput(e.to_string()))?;
    scene.pair.rgb.save(&out.join("rgb.png"))?;
    st.markers.to_image().save(&out.join("markers.png"))?;
    st.elevation.to_image().save(&out.join("elevation.png"))?;
    st.refined.to_image().save(&out.join("fg_mask.png"))?;
    println!("wrote images to {}", out.display());
    Ok(())
}
