//! Three-stage orchestration: patch backbones, fusion models, final classifier,
//! with features handed between stages through the on-disk cache.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use super::cache::FeatureCache;
use super::checkpoint::Checkpoint;
use super::data::Dataset;
use super::metrics::{Evaluation, SubjectResult};
use super::trainer::{predict, train_model, Prediction, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{build_variant, ModelHandle, ModelSet, Net, ScaleConfig, Site, VariantKind};
use crate::seed::{derive_indexed, derive_seed, Digest};
use crate::tensor::Tensor;
use crate::volume::augment::{augment, AugmentConfig};
use crate::volume::manifest::{Manifest, Split, Subject};
use crate::volume::patch::PatchGrid;
use crate::volume::preprocess::normalize_intensity;
use crate::volume::{Modality, Volume};

const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub scale: ScaleConfig,
    pub patch: TrainConfig,
    pub attention: TrainConfig,
    pub final_stage: TrainConfig,
    pub augment: AugmentConfig,
    /// Root of every per-model seed (initialisation, shuffling, augmentation).
    pub seed: u64,
    /// Worker threads for independent stage models.
    pub workers: usize,
}

impl PipelineConfig {
    pub fn paper() -> Self {
        PipelineConfig {
            scale: ScaleConfig::paper(),
            patch: TrainConfig::patch_stage(),
            attention: TrainConfig::attention_stage(),
            final_stage: TrainConfig::final_stage(),
            augment: AugmentConfig::default(),
            seed: 0,
            workers: default_workers(),
        }
    }

    /// Reduced extents and widths, with an epoch cap on the two neural stages.
    pub fn desk() -> Self {
        PipelineConfig {
            scale: ScaleConfig::desk(),
            patch: TrainConfig {
                max_epochs: 15,
                ..TrainConfig::patch_stage()
            },
            attention: TrainConfig {
                max_epochs: 200,
                ..TrainConfig::attention_stage()
            },
            final_stage: TrainConfig::final_stage(),
            augment: AugmentConfig::desk(),
            seed: 0,
            workers: default_workers(),
        }
    }

    pub fn stage(&self, stage: usize) -> &TrainConfig {
        match stage {
            1 => &self.patch,
            2 => &self.attention,
            _ => &self.final_stage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        self.augment.validate()?;
        for s in 1..=3 {
            self.stage(s).validate()?;
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }

    fn model_config(&self, stage: usize, name: &str) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, &format!("train/{name}")),
            ..self.stage(stage).clone()
        }
    }

    fn init_seed(&self, name: &str) -> u64 {
        derive_seed(self.seed, &format!("init/{name}"))
    }
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, usize::from)
}

/// Where checkpoints and feature caches live.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunPaths {
    pub checkpoints: PathBuf,
    pub cache: PathBuf,
}

impl RunPaths {
    pub fn under(root: &Path) -> Self {
        RunPaths {
            checkpoints: root.join("checkpoints"),
            cache: root.join("cache"),
        }
    }

    pub fn checkpoint(&self, handle: &ModelHandle) -> PathBuf {
        self.checkpoints.join(handle.file_name())
    }
}

/// One row of stage data: an original subject or one of its augmented copies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleInfo {
    pub key: String,
    pub subject_id: String,
    pub split: Split,
    pub label: u8,
    /// 0 for the original image pair, `k` for the `k`-th augmented copy.
    pub copy: usize,
}

/// Every sample the pipeline trains or extracts features on: originals of all
/// splits, plus `copies` augmented pairs of each training subject.
pub fn sample_index(subjects: &[Subject], copies: usize) -> Vec<SampleInfo> {
    let mut out = Vec::new();
    for split in Split::ALL {
        for s in subjects.iter().filter(|s| s.split == split) {
            let n = if split == Split::Train { copies } else { 0 };
            for copy in 0..=n {
                out.push(SampleInfo {
                    key: if copy == 0 { s.id.clone() } else { format!("{}#aug{copy}", s.id) },
                    subject_id: s.id.clone(),
                    split,
                    label: s.label,
                    copy,
                });
            }
        }
    }
    out
}

fn index_digest(index: &[SampleInfo]) -> String {
    let mut d = Digest::new();
    for s in index {
        d.str(&s.key).str(s.split.as_str()).word(s.label as u64);
    }
    d.hex()
}

/// A normalised (and possibly augmented) image pair.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub info: SampleInfo,
    pub mri: Arc<Volume>,
    pub pet: Arc<Volume>,
}

impl PreparedSample {
    pub fn volume(&self, m: Modality) -> &Volume {
        match m {
            Modality::Mri => &self.mri,
            Modality::Pet => &self.pet,
        }
    }
}

/// Loads, normalises and augments the volumes behind `index`.
pub fn prepare_samples(subjects: &[Subject], index: &[SampleInfo], cfg: &PipelineConfig) -> Result<Vec<PreparedSample>> {
    let by_id: BTreeMap<&str, &Subject> = subjects.iter().map(|s| (s.id.as_str(), s)).collect();
    let load = |s: &Subject, m: Modality| -> Result<Volume> {
        let v = s.load(m)?;
        if v.dims() != cfg.scale.volume_dims {
            return Err(Error::Validation(format!(
                "{} {} volume is {:?}, configuration expects {:?}",
                s.id,
                m,
                v.dims(),
                cfg.scale.volume_dims
            )));
        }
        normalize_intensity(&v)
    };
    // originals first, then copies derived from them
    let originals: BTreeMap<String, (Arc<Volume>, Arc<Volume>)> = index
        .iter()
        .filter(|i| i.copy == 0)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|i| -> Result<(String, (Arc<Volume>, Arc<Volume>))> {
            let s = by_id[i.subject_id.as_str()];
            Ok((i.subject_id.clone(), (Arc::new(load(s, Modality::Mri)?), Arc::new(load(s, Modality::Pet)?))))
        })
        .collect::<Result<_>>()?;
    index
        .par_iter()
        .map(|i| {
            let (mri, pet) = &originals[&i.subject_id];
            let (mri, pet) = if i.copy == 0 {
                (mri.clone(), pet.clone())
            } else {
                // one seed per pair so both modalities get the same transform
                let seed = derive_indexed(cfg.seed, &format!("augment/{}", i.subject_id), i.copy as u64);
                (
                    Arc::new(augment(mri, seed, &cfg.augment)?),
                    Arc::new(augment(pet, seed, &cfg.augment)?),
                )
            };
            Ok(PreparedSample {
                info: i.clone(),
                mri,
                pet,
            })
        })
        .collect()
}

fn data_digest(samples: &[PreparedSample]) -> String {
    let mut d = Digest::new();
    for s in samples {
        d.str(&s.info.key)
            .str(s.info.split.as_str())
            .word(s.info.label as u64)
            .floats(s.mri.voxels())
            .floats(s.pet.voxels());
    }
    d.hex()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StageSummary {
    pub stage: usize,
    pub trained: Vec<String>,
    pub reused: Vec<String>,
    /// Epochs run per trained model, in `trained` order.
    pub epochs: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct PipelineSummary {
    pub stages: Vec<StageSummary>,
    /// Checkpoint files of the variant, in model-set order.
    pub checkpoints: Vec<PathBuf>,
}

/// Result of training (or reusing) one stage model.
struct ModelRun {
    name: String,
    epochs: Option<usize>,
}

fn checkpoint_is_current(paths: &RunPaths, handle: &ModelHandle, fingerprint: &str) -> bool {
    Checkpoint::load(&paths.checkpoint(handle)).is_ok_and(|ck| ck.fingerprint == fingerprint)
}

fn cache_is_current(cache: &FeatureCache, handle: &ModelHandle, fingerprint: &str) -> bool {
    cache.fingerprint(handle).is_some_and(|fp| fp == fingerprint)
}

fn split_datasets(index: &[SampleInfo], inputs: &[Vec<Arc<Tensor<f32>>>]) -> Result<(Dataset, Dataset, Dataset)> {
    let (mut train, mut val, mut all) = (Dataset::new(), Dataset::new(), Dataset::new());
    for (info, x) in index.iter().zip(inputs) {
        let label = info.label as f32;
        match info.split {
            Split::Train => train.push(&info.key, x.clone(), label)?,
            Split::Val => val.push(&info.key, x.clone(), label)?,
            Split::Test => {}
        }
        all.push(&info.key, x.clone(), label)?;
    }
    Ok((train, val, all))
}

/// Trains `handle` on `inputs` (aligned with `index`), saves its checkpoint and,
/// if `cache` is given, the features of every sample.
#[allow(clippy::too_many_arguments)]
fn fit_and_store(
    handle: &ModelHandle,
    index: &[SampleInfo],
    inputs: &[Vec<Arc<Tensor<f32>>>],
    cfg: &PipelineConfig,
    paths: &RunPaths,
    cache: Option<&FeatureCache>,
    fingerprint: &str,
) -> Result<usize> {
    let name = handle.name();
    let (train, val, all) = split_datasets(index, inputs)?;
    let mut net: Net<f32> = handle.instantiate(&cfg.scale, cfg.init_seed(&name))?;
    let outcome = train_model(&mut net, &train, &val, &cfg.model_config(handle.stage(), &name), &name)?;
    Checkpoint::from_params(&name, fingerprint, &net.params, outcome.epochs_run, outcome.best_val_loss as f32)
        .save(&paths.checkpoint(handle))?;
    if let Some(cache) = cache {
        let Prediction { features, .. } = predict(&net, &all, EVAL_BATCH)?;
        let keyed: Vec<(String, Tensor<f32>)> = index.iter().map(|i| i.key.clone()).zip(features).collect();
        cache.write(handle, fingerprint, &keyed)?;
    }
    Ok(outcome.epochs_run)
}

fn stage_input(grid: &PatchGrid, v: &Volume, site: Site) -> Result<Tensor<f32>> {
    match site {
        Site::Patch(i) => grid.extract(v, i),
        Site::Whole => Ok(v.to_tensor()),
    }
}

fn summarize(stage: usize, runs: Vec<ModelRun>) -> StageSummary {
    let mut s = StageSummary {
        stage,
        ..Default::default()
    };
    for r in runs {
        match r.epochs {
            Some(e) => {
                s.trained.push(r.name);
                s.epochs.push(e);
            }
            None => s.reused.push(r.name),
        }
    }
    s
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn stage_one(
    set: &ModelSet,
    subjects: &[Subject],
    index: &[SampleInfo],
    cfg: &PipelineConfig,
    paths: &RunPaths,
    cache: &FeatureCache,
) -> Result<StageSummary> {
    let samples = prepare_samples(subjects, index, cfg)?;
    let digest = data_digest(&samples);
    let grid = PatchGrid::new(cfg.scale.volume_dims, cfg.scale.patch_dims)?;
    let fingerprint = |h: &ModelHandle| {
        Digest::new()
            .str(&h.name())
            .str(&digest)
            .str(&format!("{:?}{:?}", cfg.scale, cfg.augment))
            .str(&cfg.model_config(1, &h.name()).describe())
            .hex()
    };
    let needs_cache = set.plan.fusion.is_some();
    let runs = pool(cfg.workers)?.install(|| {
        set.backbones
            .par_iter()
            .map(|h| -> Result<ModelRun> {
                let ModelHandle::Backbone { modality, site } = h else {
                    unreachable!("stage one only holds backbones")
                };
                let fp = fingerprint(h);
                if checkpoint_is_current(paths, h, &fp) && (!needs_cache || cache_is_current(cache, h, &fp)) {
                    log::info!("{}: reusing checkpoint", h.name());
                    return Ok(ModelRun {
                        name: h.name(),
                        epochs: None,
                    });
                }
                let inputs = samples
                    .iter()
                    .map(|s| Ok(vec![Arc::new(stage_input(&grid, s.volume(*modality), *site)?)]))
                    .collect::<Result<Vec<_>>>()?;
                let epochs = fit_and_store(h, index, &inputs, cfg, paths, Some(cache), &fp)?;
                Ok(ModelRun {
                    name: h.name(),
                    epochs: Some(epochs),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(summarize(1, runs))
}

/// Reads the listed caches, returning their fingerprints and per-sample feature slots.
fn cached_inputs(
    cache: &FeatureCache,
    handles: &[ModelHandle],
    index: &[SampleInfo],
) -> Result<(Vec<String>, Vec<Vec<Arc<Tensor<f32>>>>)> {
    let keys: Vec<String> = index.iter().map(|i| i.key.clone()).collect();
    let mut fps = Vec::new();
    let mut inputs: Vec<Vec<Arc<Tensor<f32>>>> = vec![Vec::with_capacity(handles.len()); index.len()];
    for h in handles {
        let (fp, feats) = cache.read(h)?;
        for (slot, t) in inputs.iter_mut().zip(FeatureCache::require(&feats, h, &keys)?) {
            slot.push(Arc::new(t));
        }
        fps.push(fp);
    }
    Ok((fps, inputs))
}

fn stage_two(set: &ModelSet, index: &[SampleInfo], cfg: &PipelineConfig, paths: &RunPaths, cache: &FeatureCache) -> Result<StageSummary> {
    let runs = pool(cfg.workers)?.install(|| {
        set.fusions
            .par_iter()
            .map(|h| -> Result<ModelRun> {
                let ModelHandle::Fusion { site, .. } = h else {
                    unreachable!("stage two only holds fusion models")
                };
                let sources: Vec<ModelHandle> = Modality::BOTH
                    .iter()
                    .map(|&modality| ModelHandle::Backbone { modality, site: *site })
                    .collect();
                let (fps, inputs) = cached_inputs(cache, &sources, index)?;
                let mut d = Digest::new();
                d.str(&h.name()).str(&index_digest(index)).str(&format!("{:?}", cfg.scale));
                d.str(&cfg.model_config(2, &h.name()).describe());
                fps.iter().for_each(|fp| {
                    d.str(fp);
                });
                let fp = d.hex();
                if checkpoint_is_current(paths, h, &fp) && cache_is_current(cache, h, &fp) {
                    log::info!("{}: reusing checkpoint", h.name());
                    return Ok(ModelRun {
                        name: h.name(),
                        epochs: None,
                    });
                }
                let epochs = fit_and_store(h, index, &inputs, cfg, paths, Some(cache), &fp)?;
                Ok(ModelRun {
                    name: h.name(),
                    epochs: Some(epochs),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(summarize(2, runs))
}

fn stage_three(set: &ModelSet, index: &[SampleInfo], cfg: &PipelineConfig, paths: &RunPaths, cache: &FeatureCache) -> Result<StageSummary> {
    let h = set.final_model.as_ref().expect("fusion variants have a final model");
    let (fps, inputs) = cached_inputs(cache, &set.fusions, index)?;
    let mut d = Digest::new();
    d.str(&h.name()).str(&index_digest(index)).str(&format!("{:?}", cfg.scale));
    d.str(&cfg.model_config(3, &h.name()).describe());
    fps.iter().for_each(|fp| {
        d.str(fp);
    });
    let fp = d.hex();
    let run = if checkpoint_is_current(paths, h, &fp) {
        log::info!("{}: reusing checkpoint", h.name());
        ModelRun {
            name: h.name(),
            epochs: None,
        }
    } else {
        ModelRun {
            name: h.name(),
            epochs: Some(fit_and_store(h, index, &inputs, cfg, paths, None, &fp)?),
        }
    };
    Ok(summarize(3, vec![run]))
}

fn log_stage(s: &StageSummary, seconds: f64) {
    let mean = if s.epochs.is_empty() {
        0.0
    } else {
        s.epochs.iter().sum::<usize>() as f64 / s.epochs.len() as f64
    };
    log::info!(
        "== stage {} summary: {} trained, {} reused, mean epochs {:.1}, {:.1}s ==",
        s.stage,
        s.trained.len(),
        s.reused.len(),
        mean,
        seconds
    );
}

/// Runs the requested stages (1, 2, 3) of `variant`. Stages the variant lacks are skipped.
pub fn run_stage_pipeline(
    manifest: &Manifest,
    variant: VariantKind,
    stages: &[usize],
    cfg: &PipelineConfig,
    paths: &RunPaths,
) -> Result<PipelineSummary> {
    cfg.validate()?;
    if let Some(s) = stages.iter().find(|s| !(1..=3).contains(*s)) {
        return Err(Error::Config(format!("unknown stage {s}")));
    }
    let set = build_variant(variant, &cfg.scale)?;
    let subjects = manifest.subjects()?;
    for split in [Split::Train, Split::Val] {
        if !subjects.iter().any(|s| s.split == split) {
            return Err(Error::Validation(format!("manifest has no {split} subjects")));
        }
    }
    fs::create_dir_all(&paths.checkpoints).map_err(|e| Error::io(&paths.checkpoints, e))?;
    let cache = FeatureCache::new(&paths.cache)?;
    let index = sample_index(&subjects, cfg.augment.copies);
    let mut summary = PipelineSummary::default();
    for &stage in stages {
        if stage > set.plan.stage_count() {
            log::info!("variant {variant} has no stage {stage}; skipping");
            continue;
        }
        let t0 = Instant::now();
        log::info!("== stage {stage} ({variant}) ==");
        let s = match stage {
            1 => stage_one(&set, &subjects, &index, cfg, paths, &cache)?,
            2 => stage_two(&set, &index, cfg, paths, &cache)?,
            _ => stage_three(&set, &index, cfg, paths, &cache)?,
        };
        log_stage(&s, t0.elapsed().as_secs_f64());
        summary.stages.push(s);
    }
    summary.checkpoints = set.all().into_iter().map(|h| paths.checkpoint(h)).collect();
    Ok(summary)
}

fn load_net(handle: &ModelHandle, cfg: &PipelineConfig, dir: &Path) -> Result<Net<f32>> {
    let path = dir.join(handle.file_name());
    if !path.exists() {
        return Err(Error::Missing {
            what: format!("stage {} checkpoint", handle.stage()),
            detail: path.display().to_string(),
        });
    }
    let ck = Checkpoint::load(&path)?;
    if ck.model_id != handle.name() {
        return Err(Error::format(&path, format!("holds {}, expected {}", ck.model_id, handle.name())));
    }
    let mut net: Net<f32> = handle.instantiate(&cfg.scale, 0)?;
    net.params.load_entries(&ck.entries)?;
    Ok(net)
}

fn dataset_of(samples: &[PreparedSample], inputs: Vec<Vec<Arc<Tensor<f32>>>>) -> Result<Dataset> {
    let mut d = Dataset::new();
    for (s, x) in samples.iter().zip(inputs) {
        d.push(&s.info.key, x, s.info.label as f32)?;
    }
    Ok(d)
}

/// Probabilities of `variant` for prepared samples, running every stage from the volumes.
pub fn predict_variant(
    variant: VariantKind,
    samples: &[PreparedSample],
    cfg: &PipelineConfig,
    checkpoints: &Path,
) -> Result<Vec<f32>> {
    let set = build_variant(variant, &cfg.scale)?;
    let grid = PatchGrid::new(cfg.scale.volume_dims, cfg.scale.patch_dims)?;
    let mut backbone_out: BTreeMap<String, Prediction> = BTreeMap::new();
    for h in &set.backbones {
        let ModelHandle::Backbone { modality, site } = h else { unreachable!() };
        let net = load_net(h, cfg, checkpoints)?;
        let inputs = samples
            .iter()
            .map(|s| Ok(vec![Arc::new(stage_input(&grid, s.volume(*modality), *site)?)]))
            .collect::<Result<Vec<_>>>()?;
        backbone_out.insert(h.name(), predict(&net, &dataset_of(samples, inputs)?, EVAL_BATCH)?);
    }
    let Some(final_handle) = &set.final_model else {
        return Ok(backbone_out.remove(&set.backbones[0].name()).expect("one backbone").probs);
    };
    let features = |p: &Prediction, i: usize| Arc::new(p.features[i].clone());
    let mut fusion_out = Vec::new();
    for h in &set.fusions {
        let ModelHandle::Fusion { site, .. } = h else { unreachable!() };
        let net = load_net(h, cfg, checkpoints)?;
        let mri = &backbone_out[&ModelHandle::Backbone { modality: Modality::Mri, site: *site }.name()];
        let pet = &backbone_out[&ModelHandle::Backbone { modality: Modality::Pet, site: *site }.name()];
        let inputs = (0..samples.len()).map(|i| vec![features(mri, i), features(pet, i)]).collect();
        fusion_out.push(predict(&net, &dataset_of(samples, inputs)?, EVAL_BATCH)?);
    }
    let net = load_net(final_handle, cfg, checkpoints)?;
    let inputs = (0..samples.len())
        .map(|i| fusion_out.iter().map(|p| features(p, i)).collect())
        .collect();
    Ok(predict(&net, &dataset_of(samples, inputs)?, EVAL_BATCH)?.probs)
}

/// Evaluates `variant` on the original (unaugmented) subjects of `split`.
pub fn evaluate_variant(
    manifest: &Manifest,
    variant: VariantKind,
    split: Split,
    cfg: &PipelineConfig,
    checkpoints: &Path,
) -> Result<Evaluation> {
    let subjects = manifest.split(split)?;
    if subjects.is_empty() {
        return Err(Error::Validation(format!("split {split} is empty")));
    }
    let index = sample_index(&subjects, 0);
    let samples = prepare_samples(&subjects, &index, cfg)?;
    let probs = predict_variant(variant, &samples, cfg, checkpoints)?;
    Ok(Evaluation {
        variant: variant.to_string(),
        split: split.to_string(),
        rows: samples
            .iter()
            .zip(probs)
            .map(|(s, p)| SubjectResult {
                subject_id: s.info.subject_id.clone(),
                label: s.info.label,
                probability: p,
            })
            .collect(),
    })
}
