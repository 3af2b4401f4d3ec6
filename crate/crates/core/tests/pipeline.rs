use shadowsense::evaluation::EvalReport;
use shadowsense::fusion::{infer_pair, FusionWeights, InferenceMode};
use shadowsense::mask_gen::{to_grayscale, BG_MARKER_MAX, FG_MARKER_MIN};
use shadowsense::synthdata::{generate_split, SceneSpec};
use shadowsense::trainer::{prepare_pairs, train, LogRow, MaskCache, Model, TrainConfig};

fn tiny_cfg() -> TrainConfig {
    let mut cfg = TrainConfig { batch_size: 4, iterations: 100, ..Default::default() };
    cfg.detector.widths = [4, 8, 8, 16];
    cfg.detector.fpn_channels = 8;
    cfg
}

#[test]
fn alignment_loss_falls_over_a_hundred_steps() {
    let cfg = tiny_cfg();
    let mut model = Model::new(&cfg, 0);
    // A thermal branch that starts away from RGB gives the loss room to fall.
    model.store.get_mut("thermal.pre.w").unwrap().data_mut().copy_from_slice(&[0.2, 1.8, 0.6]);
    let scenes = generate_split(&SceneSpec { height: 64, width: 64, crowns: (2, 4), radius: (5.0, 9.0), shadow_margin: 2.0, ..SceneSpec::default() }, 0, 12).unwrap();
    let pairs: Vec<_> = scenes.into_iter().enumerate().map(|(i, s)| (format!("p{i}"), s.pair)).collect();
    let tp = prepare_pairs(&model, &cfg, &pairs, &MaskCache::default()).unwrap();
    let out = train(&mut model, &tp, &cfg, None).unwrap();
    let mean = |r: &[LogRow]| r.iter().map(|x| x.l_fpn as f64).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&out.log[..10]), mean(&out.log[90..]));
    assert!(last < first, "L_FPN first10 {first} last10 {last}");
    assert!(out.log.iter().all(|r| r.l_fpn.is_finite() && r.l_d.iter().all(|v| v.is_finite())));
}

#[test]
fn zero_thermal_weight_fuses_to_rgb_only() {
    let mut cfg = tiny_cfg();
    cfg.fusion = FusionWeights::new(0.0, cfg.fusion.eta).unwrap();
    let mut model = Model::new(&cfg, 1);
    model.store.get_mut("thermal.pre.w").unwrap().data_mut()[1] = -1.0;
    let setup = model.inference_setup(&cfg);
    let scenes = generate_split(&SceneSpec { height: 64, width: 64, ..SceneSpec::small() }, 2, 4).unwrap();
    let report = |mode| {
        let (mut p, mut m, mut g) = (vec![], vec![], vec![]);
        for s in &scenes {
            let r = infer_pair(&setup, &model.store, &s.pair, mode).unwrap();
            p.push(r.detections);
            m.push(r.bg_mask);
            g.push(s.annotations.clone());
        }
        EvalReport::from_parts(InferenceMode::RgbOnly, (0..scenes.len()).map(|i| i.to_string()).collect(), p, &g, &m)
    };
    assert_eq!(report(InferenceMode::Fused), report(InferenceMode::RgbOnly));
}

#[test]
fn synthetic_labels_are_sound() {
    let scenes = generate_split(&SceneSpec { shadow_fraction: 0.5, noise: 0.0, ..SceneSpec::small() }, 0, 8).unwrap();
    for s in &scenes {
        let gray = to_grayscale(&s.pair.rgb).unwrap();
        let (_, w) = s.pair.dims();
        for c in &s.crowns {
            let inside: Vec<f32> = (0..gray.data().len()).filter(|&i| c.contains(i / w, i % w)).map(|i| gray.data()[i]).collect();
            if c.shadowed {
                assert!(inside.iter().all(|&v| v < BG_MARKER_MAX));
            } else {
                assert!(inside.iter().any(|&v| v > FG_MARKER_MIN));
            }
        }
    }
}

#[test]
fn acceptance_test_split_has_enough_shadowed_crowns() {
    let test = generate_split(&SceneSpec { shadow_fraction: 0.3, ..SceneSpec::small() }, 2, 50).unwrap();
    let difficult: usize = test.iter().map(|s| s.annotations.iter().filter(|a| a.difficult).count()).sum();
    assert!(difficult >= 100, "{difficult}");
}
