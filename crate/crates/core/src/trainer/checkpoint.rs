//! Checkpoint bundles: a directory holding `index.txt` (one line per array:
//! `group name dims offset`), `tensors.bin` (little-endian f32, in index
//! order), `config.txt` and `meta.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{format_kv, parse_kv, read_kv, write_text};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub params: ParamStore,
    pub adam: Adam,
    pub iteration: usize,
    pub config: BTreeMap<String, String>,
}

fn dims_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "-".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl CheckpointBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = String::new();
        let mut blob: Vec<u8> = Vec::new();
        let groups: [(&str, Box<dyn Iterator<Item = (&String, &Tensor)>>); 3] = [
            ("param", Box::new(self.params.iter())),
            ("adam_m", Box::new(self.adam.m.iter())),
            ("adam_v", Box::new(self.adam.v.iter())),
        ];
        for (group, items) in groups {
            for (name, t) in items {
                if name.contains(char::is_whitespace) {
                    return Err(Error::Checkpoint(format!("array name `{name}` contains whitespace")));
                }
                index.push_str(&format!("{group} {name} {} {}\n", dims_str(t.shape()), blob.len() / 4));
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        write_text(&dir.join("index.txt"), &index)?;
        let bin = dir.join("tensors.bin");
        fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
        write_text(&dir.join("config.txt"), &format_kv(&self.config))?;
        let a = &self.adam;
        let meta = format!(
            "format = {FORMAT_VERSION}\niteration = {}\nadam_step = {}\nadam_beta1 = {}\nadam_beta2 = {}\nadam_eps = {}\n",
            self.iteration, a.step, a.beta1, a.beta2, a.eps
        );
        write_text(&dir.join("meta.txt"), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint directory", dir.display())));
        }
        let meta = read_kv(&dir.join("meta.txt"))?;
        let field = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("meta.txt lacks `{k}`")));
        let num = |k: &str| -> Result<f64> {
            field(k)?.parse::<f64>().map_err(|_| Error::Checkpoint(format!("meta.txt: bad `{k}`")))
        };
        if num("format")? as u32 != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", field("format")?)));
        }
        let fnum = |k: &str| -> Result<f32> {
            field(k)?.parse::<f32>().map_err(|_| Error::Checkpoint(format!("meta.txt: bad `{k}`")))
        };
        let mut adam = Adam { beta1: fnum("adam_beta1")?, beta2: fnum("adam_beta2")?, eps: fnum("adam_eps")?, ..Adam::default() };
        adam.step = num("adam_step")? as u64;
        let iteration = num("iteration")? as usize;

        let bin_path = dir.join("tensors.bin");
        let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if blob.len() % 4 != 0 {
            return Err(Error::Checkpoint("tensors.bin length is not a multiple of 4".into()));
        }
        let floats: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let index_path = dir.join("index.txt");
        let index = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut params = ParamStore::new();
        for (ln, line) in index.lines().enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Checkpoint(format!("index.txt line {}: `{line}`", ln + 1));
            if parts.len() != 4 {
                return Err(bad());
            }
            let shape: Vec<usize> = if parts[2] == "-" {
                vec![]
            } else {
                parts[2].split('x').map(|d| d.parse().map_err(|_| bad())).collect::<Result<_>>()?
            };
            let offset: usize = parts[3].parse().map_err(|_| bad())?;
            let len: usize = shape.iter().product();
            let data = floats.get(offset..offset + len).ok_or_else(bad)?.to_vec();
            let t = Tensor::new(shape, data)?;
            let name = parts[1].to_string();
            match parts[0] {
                "param" => params.insert(name, t),
                "adam_m" => {
                    adam.m.insert(name, t);
                }
                "adam_v" => {
                    adam.v.insert(name, t);
                }
                _ => return Err(bad()),
            }
        }
        let config_path = dir.join("config.txt");
        let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let config = parse_kv(&text).map_err(|m| Error::format(&config_path, m))?;
        Ok(Self { params, adam, iteration, config })
    }
}

/// Copies arrays from `source` into `target` following `src = dst` lines;
/// a trailing `*` on both sides maps a whole prefix. Shapes must agree.
pub fn import_params(target: &mut ParamStore, source: &ParamStore, mapping: &str) -> Result<usize> {
    let rules = parse_kv(mapping).map_err(Error::Checkpoint)?;
    let mut copied = 0;
    for (src, dst) in &rules {
        let pairs: Vec<(String, String)> = match (src.strip_suffix('*'), dst.strip_suffix('*')) {
            (Some(sp), Some(dp)) => source
                .names()
                .filter(|n| n.starts_with(sp))
                .map(|n| (n.clone(), format!("{dp}{}", &n[sp.len()..])))
                .collect(),
            (None, None) => vec![(src.clone(), dst.clone())],
            _ => return Err(Error::Checkpoint(format!("mapping `{src} = {dst}`: wildcards must appear on both sides"))),
        };
        if pairs.is_empty() {
            return Err(Error::Checkpoint(format!("mapping `{src}` matched nothing")));
        }
        for (s, d) in pairs {
            let t = source.get(&s).map_err(|_| Error::Checkpoint(format!("source lacks `{s}`")))?;
            let cur = target.get(&d).map_err(|_| Error::Checkpoint(format!("target lacks `{d}`")))?;
            if cur.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("`{s}` {:?} does not fit `{d}` {:?}", t.shape(), cur.shape())));
            }
            target.insert(d, t.clone());
            copied += 1;
        }
    }
    Ok(copied)
}
