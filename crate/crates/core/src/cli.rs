//! The `shadowsense` command line: synth, mask, pretrain, train, infer, eval
//! and export-features. Every subcommand takes `--config`, `--seed` and
//! `--out` and writes a `run_manifest.txt` beside its outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_with, CoverageBasis};
use crate::features::{export_features, write_feature_csv};
use crate::fusion::{infer_pair, InferenceMode};
use crate::image::ImagePair;
use crate::io::{read_annotations, read_kv, read_manifest, write_detections, write_text, PairEntry, RunManifest};
use crate::mask_gen::{mask_stages, Polarity};
use crate::synthdata::{generate_dataset, SceneSpec, SplitCounts};
use crate::trainer::{
    format_source_log, import_params, prepare_pairs, pretrain, train, CheckpointBundle, MaskCache, Model, TrainConfig, CHECKPOINT_DIR,
};

const INFERENCE_KEYS: [&str; 5] = ["lambda_t", "eta", "score_threshold", "nms_threshold", "max_detections"];

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn is_bool_key(key: &str) -> bool {
    matches!(TrainConfig::default().get(key).as_deref(), Some("true" | "false"))
}

/// One `--kebab-case` option per config key (except `seed`, which is common).
fn config_args<'a>(keys: impl IntoIterator<Item = &'a str>) -> Vec<Arg> {
    keys.into_iter()
        .filter(|k| *k != "seed")
        .map(|k| {
            let a = Arg::new(k.to_string()).long(flag_name(k)).value_name("VALUE").help(format!("override config key `{k}`"));
            if is_bool_key(k) {
                a.num_args(0..=1).default_missing_value("true")
            } else {
                a
            }
        })
        .collect()
}

fn common(cmd: Command, out_help: &'static str) -> Command {
    cmd.arg(Arg::new("config").long("config").value_name("FILE").help("flat `key = value` config file"))
        .arg(Arg::new("seed").long("seed").value_name("N").value_parser(clap::value_parser!(u64)))
        .arg(Arg::new("out").long("out").value_name("DIR").required(true).help(out_help))
}

fn manifest_arg() -> Arg {
    Arg::new("manifest").long("manifest").value_name("CSV").required(true).help("pair manifest (rgb_path, thermal_path[, annotation_path])")
}

fn checkpoint_arg() -> Arg {
    Arg::new("checkpoint").long("checkpoint").value_name("DIR").required(true).help("checkpoint directory or a training run directory")
}

pub fn command() -> Command {
    let synth = common(Command::new("synth").about("Generate a synthetic paired dataset"), "dataset directory")
        .arg(Arg::new("train").long("train").value_parser(clap::value_parser!(usize)).default_value("500"))
        .arg(Arg::new("val").long("val").value_parser(clap::value_parser!(usize)).default_value("0"))
        .arg(Arg::new("test").long("test").value_parser(clap::value_parser!(usize)).default_value("50"))
        .arg(Arg::new("height").long("height").value_parser(clap::value_parser!(usize)))
        .arg(Arg::new("width").long("width").value_parser(clap::value_parser!(usize)))
        .arg(Arg::new("shadow_fraction").long("shadow-fraction").value_parser(clap::value_parser!(f32)))
        .arg(Arg::new("noise").long("noise").value_parser(clap::value_parser!(f32)))
        .arg(Arg::new("small").long("small").action(ArgAction::SetTrue).help("128 px scenes with smaller crowns"))
        .arg(Arg::new("force").long("force").action(ArgAction::SetTrue).help("overwrite a non-empty output directory"));
    let mask = common(Command::new("mask").about("Write watershed FG/BG masks for every pair"), "mask directory")
        .arg(manifest_arg())
        .arg(Arg::new("polarity").long("polarity").value_parser(["fg", "bg"]).default_value("fg"))
        .arg(Arg::new("stages").long("stages").action(ArgAction::SetTrue).help("also write markers, elevation and raw flood"));
    let pretrain = common(Command::new("pretrain").about("Supervised RGB pretraining on an annotated manifest"), "run directory")
        .arg(manifest_arg())
        .args(config_args(TrainConfig::KEYS));
    let train = common(Command::new("train").about("Self-supervised thermal adaptation"), "run directory")
        .arg(manifest_arg())
        .arg(Arg::new("init").long("init").value_name("DIR").help("start from this checkpoint (e.g. a pretrain run)"))
        .arg(Arg::new("import").long("import").value_name("DIR").help("copy RGB-branch and head weights from this checkpoint"))
        .arg(Arg::new("mapping").long("mapping").value_name("FILE").requires("import").help("`src = dst` name mapping for --import"))
        .args(config_args(TrainConfig::KEYS));
    let infer = common(Command::new("infer").about("Detect crowns and write detections.csv"), "output directory")
        .arg(checkpoint_arg())
        .arg(manifest_arg())
        .arg(Arg::new("mode").long("mode").value_parser(["rgb_only", "thermal_only", "fused"]).default_value("fused"))
        .args(config_args(INFERENCE_KEYS));
    let eval = common(Command::new("eval").about("AP50, AR100 and shadowed rate on an annotated manifest"), "report directory")
        .arg(checkpoint_arg())
        .arg(manifest_arg())
        .arg(Arg::new("mode").long("mode").value_parser(["rgb_only", "thermal_only", "fused", "all"]).default_value("fused"))
        .arg(Arg::new("coverage_basis").long("coverage-basis").value_parser(["prediction", "gt"]).default_value("prediction"))
        .args(config_args(INFERENCE_KEYS));
    let export = common(Command::new("export-features").about("Pooled pyramid features per image and branch"), "output directory")
        .arg(checkpoint_arg())
        .arg(manifest_arg());
    Command::new("shadowsense")
        .version(env!("CARGO_PKG_VERSION"))
        .about("RGB-to-thermal detector adaptation with background feature fusion")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands([synth, mask, pretrain, train, infer, eval, export])
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code: 0 on success, 2 on usage errors, 1 on
/// runtime failures (reported as a single line on stderr).
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let m = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&m) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', "; "));
            1
        }
    }
}

pub fn run(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("synth", s)) => cmd_synth(s),
        Some(("mask", s)) => cmd_mask(s),
        Some(("pretrain", s)) => cmd_pretrain(s),
        Some(("train", s)) => cmd_train(s),
        Some(("infer", s)) => cmd_infer(s),
        Some(("eval", s)) => cmd_eval(s),
        Some(("export-features", s)) => cmd_export(s),
        _ => Err(Error::InvalidInput("missing subcommand".into())),
    }
}

fn path(m: &ArgMatches, id: &str) -> Option<PathBuf> {
    m.get_one::<String>(id).map(PathBuf::from)
}

fn out_dir(m: &ArgMatches) -> PathBuf {
    path(m, "out").expect("--out is required")
}

fn config_file(m: &ArgMatches) -> Result<BTreeMap<String, String>> {
    match path(m, "config") {
        Some(p) => read_kv(&p),
        None => Ok(BTreeMap::new()),
    }
}

/// Defaults, then `base` (e.g. a checkpoint's snapshot), then `--config`,
/// then explicit flags, then `--seed`.
fn resolve_config(m: &ArgMatches, base: Option<&BTreeMap<String, String>>, keys: &[&str]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(b) = base {
        cfg.apply(b)?;
    }
    cfg.apply(&config_file(m)?)?;
    let mut flags = BTreeMap::new();
    for k in keys.iter().filter(|k| **k != "seed") {
        if let Some(v) = m.get_one::<String>(k) {
            flags.insert(k.to_string(), v.clone());
        }
    }
    cfg.apply(&flags)?;
    if let Some(&s) = m.get_one::<u64>("seed") {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_manifest(m: &ArgMatches) -> Result<Vec<PairEntry>> {
    let p = path(m, "manifest").expect("--manifest is required");
    if !p.is_file() {
        return Err(Error::InvalidInput(format!("manifest {} does not exist", p.display())));
    }
    read_manifest(&p)
}

fn load_pairs(entries: &[PairEntry]) -> Result<Vec<(String, ImagePair)>> {
    entries.iter().map(|e| Ok((e.id.clone(), e.load()?))).collect()
}

/// Accepts either a checkpoint directory or a run directory holding one.
pub fn resolve_checkpoint(p: &Path) -> Result<PathBuf> {
    for cand in [p.to_path_buf(), p.join(CHECKPOINT_DIR)] {
        if cand.join("meta.txt").is_file() {
            return Ok(cand);
        }
    }
    Err(Error::Checkpoint(format!("no checkpoint at {}", p.display())))
}

fn load_model(m: &ArgMatches, keys: &[&str]) -> Result<(Model, TrainConfig, PathBuf)> {
    let dir = resolve_checkpoint(&path(m, "checkpoint").expect("--checkpoint is required"))?;
    let bundle = CheckpointBundle::load(&dir)?;
    let cfg = resolve_config(m, Some(&bundle.config), keys)?;
    Ok((Model::from_params(&cfg, bundle.params)?, cfg, dir))
}

fn write_run(name: &str, cfg: BTreeMap<String, String>, seed: u64, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>, dir: &Path) -> Result<()> {
    RunManifest { subcommand: name.into(), config: cfg, inputs, outputs, seed }.write(dir)?;
    Ok(())
}

fn scene_spec(m: &ArgMatches) -> Result<SceneSpec> {
    let mut spec = if m.get_flag("small") { SceneSpec::small() } else { SceneSpec::default() };
    for (k, v) in config_file(m)? {
        let bad = || Error::Config(format!("{k}: cannot parse `{v}`"));
        let f = || v.trim().parse::<f32>().map_err(|_| bad());
        let u = || v.trim().parse::<usize>().map_err(|_| bad());
        match k.as_str() {
            "height" => spec.height = u()?,
            "width" => spec.width = u()?,
            "crowns_min" => spec.crowns.0 = u()?,
            "crowns_max" => spec.crowns.1 = u()?,
            "radius_min" => spec.radius.0 = f()?,
            "radius_max" => spec.radius.1 = f()?,
            "shadow_fraction" => spec.shadow_fraction = f()?,
            "noise" => spec.noise = f()?,
            "shadow_margin" => spec.shadow_margin = f()?,
            "min_gap" => spec.min_gap = f()?,
            "seed" => spec.seed = u()? as u64,
            _ => return Err(Error::Config(format!("unknown scene key `{k}`"))),
        }
    }
    if let Some(&v) = m.get_one::<usize>("height") {
        spec.height = v;
    }
    if let Some(&v) = m.get_one::<usize>("width") {
        spec.width = v;
    }
    if let Some(&v) = m.get_one::<f32>("shadow_fraction") {
        spec.shadow_fraction = v;
    }
    if let Some(&v) = m.get_one::<f32>("noise") {
        spec.noise = v;
    }
    if let Some(&s) = m.get_one::<u64>("seed") {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_synth(m: &ArgMatches) -> Result<()> {
    let spec = scene_spec(m)?;
    let counts = SplitCounts {
        train: *m.get_one::<usize>("train").expect("default"),
        val: *m.get_one::<usize>("val").expect("default"),
        test: *m.get_one::<usize>("test").expect("default"),
    };
    let out = out_dir(m);
    let manifests = generate_dataset(&spec, counts, &out, m.get_flag("force"))?;
    let cfg: BTreeMap<String, String> = [
        ("height", spec.height.to_string()),
        ("width", spec.width.to_string()),
        ("crowns", format!("{},{}", spec.crowns.0, spec.crowns.1)),
        ("radius", format!("{},{}", spec.radius.0, spec.radius.1)),
        ("shadow_fraction", spec.shadow_fraction.to_string()),
        ("noise", spec.noise.to_string()),
        ("train", counts.train.to_string()),
        ("val", counts.val.to_string()),
        ("test", counts.test.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    write_run("synth", cfg, spec.seed, vec![], vec![manifests.train, manifests.val, manifests.test], &out)
}

fn cmd_mask(m: &ArgMatches) -> Result<()> {
    let entries = load_manifest(m)?;
    let out = out_dir(m);
    let polarity = match m.get_one::<String>("polarity").map(String::as_str) {
        Some("bg") => Polarity::BackgroundOne,
        _ => Polarity::ForegroundOne,
    };
    let stages = m.get_flag("stages");
    let mut outputs = Vec::new();
    for e in &entries {
        let pair = e.load()?;
        let st = mask_stages(&pair.rgb).map_err(|err| Error::Pair { pair_id: e.id.clone(), message: err.to_string() })?;
        let p = out.join(format!("{}.png", e.id));
        std::fs::create_dir_all(&out).map_err(|err| Error::io(&out, err))?;
        st.refined.with_polarity(polarity).to_image().save(&p)?;
        outputs.push(p);
        if stages {
            st.markers.to_image().save(&out.join(format!("{}_markers.png", e.id)))?;
            st.elevation.to_image().save(&out.join(format!("{}_elevation.png", e.id)))?;
            st.flooded.with_polarity(polarity).to_image().save(&out.join(format!("{}_flooded.png", e.id)))?;
        }
    }
    let mut cfg = BTreeMap::new();
    cfg.insert("polarity".into(), m.get_one::<String>("polarity").cloned().unwrap_or_default());
    write_run("mask", cfg, m.get_one::<u64>("seed").copied().unwrap_or(0), vec![path(m, "manifest").unwrap()], outputs, &out)
}

fn annotated(entries: &[PairEntry], pairs: Vec<(String, ImagePair)>) -> Result<Vec<(crate::Image, Vec<crate::evaluation::GroundTruthBox>)>> {
    entries
        .iter()
        .zip(pairs)
        .map(|(e, (_, p))| {
            let ann = e.annotations.as_ref().ok_or_else(|| Error::Pair { pair_id: e.id.clone(), message: "no annotation path".into() })?;
            let gts = read_annotations(ann)?.remove(&e.id).unwrap_or_default();
            Ok((p.rgb, gts))
        })
        .collect()
}

fn cmd_pretrain(m: &ArgMatches) -> Result<()> {
    let entries = load_manifest(m)?;
    let cfg = resolve_config(m, None, &TrainConfig::KEYS)?;
    let out = out_dir(m);
    let data = annotated(&entries, load_pairs(&entries)?)?;
    let mut model = Model::new(&cfg, cfg.seed);
    let log = pretrain(&mut model, &cfg, &data)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    model.bundle(&crate::optim::Adam::new(), 0, &cfg).save(&ckpt)?;
    let log_path = out.join("source_log.csv");
    write_text(&log_path, &format_source_log(&log))?;
    write_run("pretrain", cfg.to_map(), cfg.seed, vec![path(m, "manifest").unwrap()], vec![ckpt, log_path], &out)
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let entries = load_manifest(m)?;
    let out = out_dir(m);
    let mut inputs = vec![path(m, "manifest").unwrap()];
    let (mut model, cfg) = match path(m, "init") {
        Some(init) => {
            let dir = resolve_checkpoint(&init)?;
            let bundle = CheckpointBundle::load(&dir)?;
            let cfg = resolve_config(m, Some(&bundle.config), &TrainConfig::KEYS)?;
            inputs.push(dir);
            (Model::from_params(&cfg, bundle.params)?, cfg)
        }
        None => {
            let cfg = resolve_config(m, None, &TrainConfig::KEYS)?;
            (Model::new(&cfg, cfg.seed), cfg)
        }
    };
    let pairs = load_pairs(&entries)?;
    if let Some(src) = path(m, "import") {
        let dir = resolve_checkpoint(&src)?;
        let source = CheckpointBundle::load(&dir)?.params;
        let mapping = match path(m, "mapping") {
            Some(p) => std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?,
            None => "rgb.* = rgb.*\nhead.* = head.*\n".to_string(),
        };
        let n = import_params(&mut model.store, &source, &mapping)?;
        model.detector.sync_thermal_from_rgb(&mut model.store);
        log::info!("imported {n} arrays from {}", dir.display());
        inputs.push(dir);
    } else if m.get_one::<String>("init").is_none() {
        if cfg.pretrain_iterations > 0 && entries.iter().all(|e| e.annotations.is_some()) {
            log::info!("no --init given: pretraining the RGB branch for {} steps", cfg.pretrain_iterations);
            let data = annotated(&entries, pairs.clone())?;
            let log = pretrain(&mut model, &cfg, &data)?;
            write_text(&out.join("source_log.csv"), &format_source_log(&log))?;
        } else {
            log::warn!("training from an untrained RGB branch (no --init, --import or annotations)");
            model.detector.sync_thermal_from_rgb(&mut model.store);
        }
    }
    let training = prepare_pairs(&model, &cfg, &pairs, &MaskCache::new(cfg.mask_cache.clone()))?;
    drop(pairs);
    train(&mut model, &training, &cfg, Some(&out))?;
    let outputs = vec![out.join(CHECKPOINT_DIR), out.join(crate::trainer::LOG_FILE)];
    write_run("train", cfg.to_map(), cfg.seed, inputs, outputs, &out)
}

fn cmd_infer(m: &ArgMatches) -> Result<()> {
    let (model, cfg, ckpt) = load_model(m, &INFERENCE_KEYS)?;
    let entries = load_manifest(m)?;
    let mode = InferenceMode::parse(m.get_one::<String>("mode").expect("default"))?;
    let setup = model.inference_setup(&cfg);
    let mut all = Vec::with_capacity(entries.len());
    for e in &entries {
        let pair = e.load()?;
        let r = infer_pair(&setup, &model.store, &pair, mode).map_err(|err| Error::Pair { pair_id: e.id.clone(), message: err.to_string() })?;
        all.push((e.id.clone(), r.detections));
    }
    let out = out_dir(m);
    let p = out.join("detections.csv");
    write_detections(&p, &all)?;
    let mut map = cfg.to_map();
    map.insert("mode".into(), mode.as_str().into());
    write_run("infer", map, cfg.seed, vec![ckpt, path(m, "manifest").unwrap()], vec![p], &out)
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let (model, cfg, ckpt) = load_model(m, &INFERENCE_KEYS)?;
    let entries = load_manifest(m)?;
    let basis = match m.get_one::<String>("coverage_basis").map(String::as_str) {
        Some("gt") => CoverageBasis::GroundTruth,
        _ => CoverageBasis::Prediction,
    };
    let modes = match m.get_one::<String>("mode").map(String::as_str) {
        Some("all") => vec![InferenceMode::RgbOnly, InferenceMode::ThermalOnly, InferenceMode::Fused],
        Some(s) => vec![InferenceMode::parse(s)?],
        None => vec![InferenceMode::Fused],
    };
    let setup = model.inference_setup(&cfg);
    let out = out_dir(m);
    let mut outputs = Vec::new();
    for mode in modes {
        let report = evaluate_with(&setup, &model.store, &entries, mode, basis)?;
        let txt = out.join(format!("report_{}.txt", mode.as_str()));
        let csv = out.join(format!("report_{}.csv", mode.as_str()));
        write_text(&txt, &report.to_text())?;
        write_text(&csv, &report.to_csv())?;
        print!("{}", report.to_text());
        outputs.extend([txt, csv]);
    }
    let mut map = cfg.to_map();
    map.insert("coverage_basis".into(), m.get_one::<String>("coverage_basis").cloned().unwrap_or_default());
    write_run("eval", map, cfg.seed, vec![ckpt, path(m, "manifest").unwrap()], outputs, &out)
}

fn cmd_export(m: &ArgMatches) -> Result<()> {
    let (model, cfg, ckpt) = load_model(m, &[])?;
    let entries = load_manifest(m)?;
    let pairs = load_pairs(&entries)?;
    let rows = export_features(&model.detector, &model.store, &pairs)?;
    let out = out_dir(m);
    let p = out.join("features.csv");
    write_feature_csv(&p, &rows)?;
    write_run("export-features", cfg.to_map(), cfg.seed, vec![ckpt, path(m, "manifest").unwrap()], vec![p], &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_config_key_has_a_train_flag() {
        let cmd = command();
        let train = cmd.find_subcommand("train").unwrap();
        for k in TrainConfig::KEYS {
            assert!(train.get_arguments().any(|a| a.get_id() == k), "{k}");
        }
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(dispatch(["shadowsense", "frobnicate"]), 2);
        assert_eq!(dispatch(["shadowsense", "train", "--out", "x", "--manifest", "m", "--bogus"]), 2);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("c.txt");
        std::fs::write(&cfg_path, "batch_size = 4\nlr = 0.01\n").unwrap();
        let m = command()
            .try_get_matches_from(["s", "train", "--out", "o", "--manifest", "m", "--config", cfg_path.to_str().unwrap(), "--lr", "0.5", "--no-dat", "--seed", "9"])
            .unwrap();
        let (_, sub) = m.subcommand().unwrap();
        let cfg = resolve_config(sub, None, &TrainConfig::KEYS).unwrap();
        assert_eq!((cfg.batch_size, cfg.lr, cfg.no_dat, cfg.seed), (4, 0.5, true, 9));
    }
}
