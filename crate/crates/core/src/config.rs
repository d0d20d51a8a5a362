//! Run configuration: a line-based `key = value` file with `[section]` headers.
//!
//! ```text
//! [paths]
//! manifest = data/manifest.tsv
//! checkpoints = run/checkpoints
//! cache = run/cache
//!
//! [run]
//! variant = full
//! scale = desk
//! seed = 7
//!
//! [stage1]
//! max_epochs = 20
//! ```
//!
//! Relative paths resolve against the config file's directory. Unknown sections or
//! keys are errors; anything not given keeps the preset's value.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::VariantKind;
use crate::train::{PipelineConfig, RunPaths, TrainConfig};
use crate::volume::manifest::Manifest;

pub const SEED_ENV: &str = "MNA_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalePreset {
    Paper,
    Desk,
}

impl ScalePreset {
    pub fn pipeline(self) -> PipelineConfig {
        match self {
            ScalePreset::Paper => PipelineConfig::paper(),
            ScalePreset::Desk => PipelineConfig::desk(),
        }
    }
}

impl std::str::FromStr for ScalePreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ScalePreset::Paper),
            "desk" => Ok(ScalePreset::Desk),
            _ => Err(Error::Config(format!("unknown scale preset {s:?} (expected paper or desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Base for relative volume paths in the manifest; defaults to the manifest's directory.
    pub volumes: Option<PathBuf>,
    pub paths: RunPaths,
    pub variant: VariantKind,
    pub preset: ScalePreset,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    /// Reads `path` and applies the `MNA_SEED` override when set.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = RunConfig::parse(&text, base)?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.pipeline.seed = parse_num(SEED_ENV, &seed)?;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let entries = parse_entries(text)?;
        let preset = entries
            .iter()
            .find(|e| e.section == "run" && e.key == "scale")
            .map_or(Ok(ScalePreset::Desk), |e| e.value.parse())?;
        let mut pipeline = preset.pipeline();
        let mut manifest = None;
        let mut volumes = None;
        let mut checkpoints = None;
        let mut cache = None;
        let mut variant = VariantKind::Full;
        let resolve = |v: &str| {
            let p = Path::new(v);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        for e in &entries {
            let (k, v) = (e.key.as_str(), e.value.as_str());
            match e.section.as_str() {
                "paths" => match k {
                    "manifest" => manifest = Some(resolve(v)),
                    "volumes" => volumes = Some(resolve(v)),
                    "checkpoints" => checkpoints = Some(resolve(v)),
                    "cache" => cache = Some(resolve(v)),
                    _ => return Err(e.unknown()),
                },
                "run" => match k {
                    "variant" => variant = v.parse()?,
                    "scale" => {}
                    "seed" => pipeline.seed = parse_num(k, v)?,
                    "workers" => pipeline.workers = parse_num(k, v)?,
                    _ => return Err(e.unknown()),
                },
                "model" => {
                    let s = &mut pipeline.scale;
                    match k {
                        "volume_dims" => s.volume_dims = parse_triple(k, v)?,
                        "patch_dims" => s.patch_dims = parse_triple(k, v)?,
                        "channels" => s.channels = parse_items::<usize, 4>(k, v)?,
                        "fusion_width" => s.fusion_width = parse_num(k, v)?,
                        "heads" => s.heads = parse_num(k, v)?,
                        _ => return Err(e.unknown()),
                    }
                }
                "augment" => {
                    let a = &mut pipeline.augment;
                    match k {
                        "max_rotation_deg" => a.max_rotation_deg = parse_num(k, v)?,
                        "max_translation" => a.max_translation = parse_num(k, v)?,
                        "scale_range" => {
                            let [lo, hi] = parse_items::<f64, 2>(k, v)?;
                            a.scale_range = (lo, hi);
                        }
                        "elastic_spacing" => a.elastic_spacing = parse_num(k, v)?,
                        "elastic_sigma" => a.elastic_sigma = parse_num(k, v)?,
                        "copies" => a.copies = parse_num(k, v)?,
                        _ => return Err(e.unknown()),
                    }
                }
                "stage1" => set_train(&mut pipeline.patch, e)?,
                "stage2" => set_train(&mut pipeline.attention, e)?,
                "stage3" => set_train(&mut pipeline.final_stage, e)?,
                other => return Err(Error::Config(format!("line {}: unknown section [{other}]", e.line))),
            }
        }
        let manifest = manifest.ok_or_else(|| Error::Config("[paths] manifest is required".into()))?;
        let root = base.join("run");
        let paths = RunPaths {
            checkpoints: checkpoints.unwrap_or_else(|| root.join("checkpoints")),
            cache: cache.unwrap_or_else(|| root.join("cache")),
        };
        pipeline.validate()?;
        Ok(RunConfig {
            manifest,
            volumes,
            paths,
            variant,
            preset,
            pipeline,
        })
    }

    pub fn load_manifest(&self) -> Result<Manifest> {
        match &self.volumes {
            None => Manifest::read(&self.manifest),
            Some(base) => {
                let text = fs::read_to_string(&self.manifest).map_err(|e| Error::io(&self.manifest, e))?;
                Manifest::parse(&text, &self.manifest, base)
            }
        }
    }
}

struct ConfigEntry {
    line: usize,
    section: String,
    key: String,
    value: String,
}

impl ConfigEntry {
    fn unknown(&self) -> Error {
        Error::Config(format!("line {}: unknown key {:?} in [{}]", self.line, self.key, self.section))
    }
}

fn parse_entries(text: &str) -> Result<Vec<ConfigEntry>> {
    let mut out = Vec::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)));
        };
        if section.is_empty() {
            return Err(Error::Config(format!("line {}: key outside any section", i + 1)));
        }
        out.push(ConfigEntry {
            line: i + 1,
            section: section.clone(),
            key: k.trim().to_string(),
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

fn set_train(t: &mut TrainConfig, e: &ConfigEntry) -> Result<()> {
    let (k, v) = (e.key.as_str(), e.value.as_str());
    match k {
        "learning_rate" => t.learning_rate = parse_num(k, v)?,
        "momentum" => t.momentum = parse_num(k, v)?,
        "batch_size" => t.batch_size = parse_num(k, v)?,
        "max_epochs" => t.max_epochs = parse_num(k, v)?,
        "patience" => t.patience = parse_num(k, v)?,
        "min_delta" => t.min_delta = parse_num(k, v)?,
        _ => return Err(e.unknown()),
    }
    Ok(())
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_items<N: std::str::FromStr + Copy + Default, const L: usize>(key: &str, v: &str) -> Result<[N; L]>
where
    [N; L]: Default,
{
    let items: Vec<&str> = v.split(',').map(str::trim).collect();
    if items.len() != L {
        return Err(Error::Config(format!("{key}: expected {L} comma-separated values, got {v:?}")));
    }
    let mut out = <[N; L]>::default();
    for (o, s) in out.iter_mut().zip(items) {
        *o = parse_num(key, s)?;
    }
    Ok(out)
}

/// `X,Y,Z` extents.
fn parse_triple(key: &str, v: &str) -> Result<[usize; 3]> {
    parse_items::<usize, 3>(key, v)
}

pub fn parse_dims(v: &str) -> Result<[usize; 3]> {
    parse_triple("dims", v)
}
