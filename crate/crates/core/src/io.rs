//! Plain-text file formats: pair manifests, annotation and detection CSVs,
//! flat `key = value` configs and per-run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::boxes::BBox;
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::evaluation::GroundTruthBox;
use crate::image::ImagePair;

/// One manifest row. Relative paths are resolved against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub id: String,
    pub rgb: PathBuf,
    pub thermal: PathBuf,
    pub annotations: Option<PathBuf>,
}

impl PairEntry {
    pub fn load(&self) -> Result<ImagePair> {
        ImagePair::load(&self.rgb, &self.thermal).map_err(|e| Error::Pair { pair_id: self.id.clone(), message: e.to_string() })
    }
}

pub const MANIFEST_HEADER: [&str; 3] = ["rgb_path", "thermal_path", "annotation_path"];

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).flexible(true).from_reader(file))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads `rgb_path,thermal_path[,annotation_path]` rows. The pair id is the
/// RGB file stem.
pub fn read_manifest(path: &Path) -> Result<Vec<PairEntry>> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found")));
    }
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let resolve = |s: &str| {
        let p = PathBuf::from(s);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut out = Vec::new();
    for (i, rec) in reader(path)?.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() < 2 || rec[0].is_empty() || rec[1].is_empty() {
            return Err(Error::format(path, format!("row {} needs rgb_path and thermal_path", i + 1)));
        }
        let rgb = resolve(&rec[0]);
        let annotations = rec.get(2).filter(|s| !s.is_empty()).map(resolve);
        out.push(PairEntry { id: stem(&rgb), rgb, thermal: resolve(&rec[1]), annotations });
    }
    Ok(out)
}

/// Writes a manifest with paths relative to its directory when possible.
pub fn write_manifest(path: &Path, entries: &[PairEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
    let mut w = writer(path)?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_err(path, e))?;
    for e in entries {
        let ann = e.annotations.as_deref().map(rel).unwrap_or_default();
        w.write_record([rel(&e.rgb), rel(&e.thermal), ann]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_f32(path: &Path, field: &str) -> Result<f32> {
    field.parse::<f32>().map_err(|_| Error::format(path, format!("`{field}` is not a number")))
}

/// Annotation rows `image_id,xmin,ymin,xmax,ymax,difficult`, grouped by id.
pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, Vec<GroundTruthBox>>> {
    let mut out: BTreeMap<String, Vec<GroundTruthBox>> = BTreeMap::new();
    for rec in reader(path)?.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 6 {
            return Err(Error::format(path, format!("expected 6 fields, got {}", rec.len())));
        }
        let c = (1..5).map(|i| parse_f32(path, &rec[i])).collect::<Result<Vec<_>>>()?;
        let difficult = match &rec[5] {
            "0" => false,
            "1" => true,
            other => return Err(Error::format(path, format!("difficult must be 0 or 1, got `{other}`"))),
        };
        let bbox = BBox::new(c[0], c[1], c[2], c[3]);
        if !bbox.is_valid() {
            return Err(Error::format(path, format!("degenerate box {bbox:?}")));
        }
        out.entry(rec[0].to_string()).or_default().push(GroundTruthBox { bbox, difficult });
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, image_id: &str, boxes: &[GroundTruthBox]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["image_id", "xmin", "ymin", "xmax", "ymax", "difficult"]).map_err(|e| csv_err(path, e))?;
    for g in boxes {
        let b = g.bbox;
        w.write_record([
            image_id.to_string(),
            b.xmin.to_string(),
            b.ymin.to_string(),
            b.xmax.to_string(),
            b.ymax.to_string(),
            (g.difficult as u8).to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Detection rows `image_id,xmin,ymin,xmax,ymax,score`.
pub fn write_detections(path: &Path, dets: &[(String, Vec<Detection>)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["image_id", "xmin", "ymin", "xmax", "ymax", "score"]).map_err(|e| csv_err(path, e))?;
    for (id, list) in dets {
        for d in list {
            let b = d.bbox;
            w.write_record([
                id.clone(),
                format!("{:.3}", b.xmin),
                format!("{:.3}", b.ymin),
                format!("{:.3}", b.xmax),
                format!("{:.3}", b.ymax),
                format!("{:.6}", d.score),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<BTreeMap<String, Vec<Detection>>> {
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for rec in reader(path)?.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 6 {
            return Err(Error::format(path, format!("expected 6 fields, got {}", rec.len())));
        }
        let v = (1..6).map(|i| parse_f32(path, &rec[i])).collect::<Result<Vec<_>>>()?;
        out.entry(rec[0].to_string())
            .or_default()
            .push(Detection { bbox: BBox::new(v[0], v[1], v[2], v[3]), score: v[4] });
    }
    Ok(out)
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text).map_err(|m| Error::format(path, m))
}

pub fn format_kv(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Provenance record written beside every run's outputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
}

pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "subcommand = {}\nseed = {}\nversion = {}\n",
            self.subcommand,
            self.seed,
            env!("CARGO_PKG_VERSION")
        );
        for p in &self.inputs {
            s.push_str(&format!("input = {}\n", p.display()));
        }
        for p in &self.outputs {
            s.push_str(&format!("output = {}\n", p.display()));
        }
        for (k, v) in &self.config {
            s.push_str(&format!("config.{k} = {v}\n"));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RUN_MANIFEST_FILE);
        write_text(&path, &self.to_text())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parsing() {
        let m = parse_kv("# header\nbatch_size = 4\n\n lr=0.01 # trailing\n").unwrap();
        assert_eq!(m["batch_size"], "4");
        assert_eq!(m["lr"], "0.01");
        assert!(parse_kv("no equals sign").is_err());
        assert_eq!(parse_kv(&format_kv(&m)).unwrap(), m);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.csv");
        let entries = vec![PairEntry {
            id: "s0".into(),
            rgb: dir.path().join("rgb/s0.png"),
            thermal: dir.path().join("thermal/s0.png"),
            annotations: Some(dir.path().join("ann/s0.csv")),
        }];
        write_manifest(&path, &entries).unwrap();
        assert!(fs::read_to_string(&path).unwrap().contains("rgb/s0.png"));
        assert_eq!(read_manifest(&path).unwrap(), entries);
        assert!(read_manifest(&dir.path().join("missing.csv")).is_err());
    }

    #[test]
    fn annotation_and_detection_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ann = dir.path().join("a.csv");
        let gts = vec![
            GroundTruthBox { bbox: BBox::new(1.0, 2.0, 10.5, 12.0), difficult: false },
            GroundTruthBox { bbox: BBox::new(20.0, 20.0, 30.0, 31.0), difficult: true },
        ];
        write_annotations(&ann, "img", &gts).unwrap();
        assert_eq!(read_annotations(&ann).unwrap()["img"], gts);

        let det = dir.path().join("d.csv");
        let d = Detection { bbox: BBox::new(1.0, 2.0, 3.0, 4.5), score: 0.75 };
        write_detections(&det, &[("img".into(), vec![d])]).unwrap();
        assert_eq!(read_detections(&det).unwrap()["img"], vec![d]);

        fs::write(&ann, "image_id,xmin,ymin,xmax,ymax,difficult\nimg,5,5,1,1,0\n").unwrap();
        assert!(read_annotations(&ann).is_err());
    }
}
