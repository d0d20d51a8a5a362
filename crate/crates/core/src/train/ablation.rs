//! Variant comparison over several seeds, each on a freshly generated synthetic cohort.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::metrics::format_report;
use super::pipeline::{evaluate_variant, run_stage_pipeline, PipelineConfig, RunPaths};
use crate::error::{Error, Result};
use crate::model::{ScaleConfig, VariantKind};
use crate::volume::augment::AugmentConfig;
use crate::volume::manifest::{Manifest, Split};
use crate::volume::synth::{generate_synthetic_cohort, SynthConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub variants: Vec<VariantKind>,
    pub seeds: Vec<u64>,
    /// Cohort template; `dims` and `seed` are overwritten per run.
    pub synth: SynthConfig,
    /// Training template; `seed` is overwritten per run.
    pub pipeline: PipelineConfig,
    pub split: Split,
}

impl AblationConfig {
    /// Smaller volumes, widths and epoch caps than the desk preset, so that a
    /// five-seed sweep of four variants fits in minutes.
    pub fn quick() -> Self {
        let mut pipeline = PipelineConfig::desk();
        pipeline.scale = ScaleConfig {
            volume_dims: [22, 26, 22],
            patch_dims: [10, 12, 10],
            channels: [4, 8, 16, 32],
            fusion_width: 8,
            heads: 4,
        };
        pipeline.augment = AugmentConfig {
            copies: 1,
            ..AugmentConfig::desk()
        };
        pipeline.patch.max_epochs = 10;
        AblationConfig {
            variants: vec![
                VariantKind::Full,
                VariantKind::NoAttention,
                VariantKind::UnimodalMri,
                VariantKind::UnimodalPet,
            ],
            seeds: (0..5).collect(),
            synth: SynthConfig::default().with_split_totals([40, 10, 10]),
            pipeline,
            split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationResult {
    /// Accuracy per variant, one entry per seed in seed order.
    pub accuracy: BTreeMap<VariantKind, Vec<f64>>,
    /// Evaluation report text per seed.
    pub reports: Vec<String>,
}

impl AblationResult {
    pub fn mean(&self, v: VariantKind) -> Option<f64> {
        let xs = self.accuracy.get(&v)?;
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    /// Tab-separated table: one row per variant, one column per seed, then the mean.
    pub fn table(&self, seeds: &[u64]) -> String {
        let mut s = String::from("variant");
        for seed in seeds {
            let _ = write!(s, "\tseed{seed}");
        }
        s.push_str("\tmean\n");
        for (v, xs) in &self.accuracy {
            let _ = write!(s, "{v}");
            for x in xs {
                let _ = write!(s, "\t{x:.4}");
            }
            let _ = writeln!(s, "\t{:.4}", self.mean(*v).unwrap_or(0.0));
        }
        s
    }
}

/// Trains and evaluates every variant for every seed under `root/seed{N}`.
/// Variants of one seed share a run directory, so common stage-1 models train once.
pub fn run_ablation(cfg: &AblationConfig, root: &Path) -> Result<AblationResult> {
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut out = AblationResult::default();
    for &seed in &cfg.seeds {
        let dir = root.join(format!("seed{seed}"));
        let synth = SynthConfig {
            dims: cfg.pipeline.scale.volume_dims,
            seed,
            ..cfg.synth.clone()
        };
        let cohort = generate_synthetic_cohort(&synth, &dir.join("data"))?;
        let manifest = Manifest::read(&cohort.manifest_path)?;
        let pipeline = PipelineConfig {
            seed,
            ..cfg.pipeline.clone()
        };
        let paths = RunPaths::under(&dir.join("run"));
        let mut evals = Vec::new();
        for &v in &cfg.variants {
            run_stage_pipeline(&manifest, v, &[1, 2, 3], &pipeline, &paths)?;
            let e = evaluate_variant(&manifest, v, cfg.split, &pipeline, &paths.checkpoints)?;
            let acc = e.counts().accuracy();
            log::info!("ablation seed {seed}: {v} accuracy {acc:.4}");
            out.accuracy.entry(v).or_default().push(acc);
            evals.push(e);
        }
        out.reports.push(format_report(&evals)?);
    }
    Ok(out)
}
