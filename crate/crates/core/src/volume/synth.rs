//! Synthetic paired MRI/PET cohort with a learnable converter signal.
//!
//! Every subject gets an ellipsoidal brain of smooth plus white noise. Converters
//! additionally carry a signal in a fixed ellipsoid: darker in MRI, brighter in
//! PET. A configurable share of converters shows it in one modality only.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::augment::DisplacementField;
use super::codec::write_volume;
use super::cohort::{select_cohort, Diagnosis, SubjectRecord, DAYS_PER_DECADE, SCAN_WINDOW_DAYS};
use super::manifest::{Manifest, ManifestRow, Split};
use super::preprocess::{temporal_average, FrameSequence};
use super::{Modality, Volume};
use crate::error::{Error, Result};
use crate::seed::derive_indexed;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    /// Stable subjects per split (train, val, test).
    pub stable: [usize; 3],
    /// Converters per split.
    pub converters: [usize; 3],
    /// Signal intensity offset inside the region (MRI darker, PET brighter).
    pub amplitude: f32,
    /// Share of converters whose signal appears in one modality only.
    pub single_modality_fraction: f64,
    pub base_intensity: f32,
    pub smooth_std: f64,
    pub noise_std: f64,
    /// Region centre as a fraction of each extent.
    pub region_centre: [f64; 3],
    /// Region semi-axes as a fraction of each extent.
    pub region_radius: [f64; 3],
    /// Records that fail the selection criteria, written alongside the real ones.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dims: super::CANONICAL_DIMS,
            stable: [60, 20, 20],
            converters: [62, 21, 21],
            amplitude: 30.0,
            single_modality_fraction: 0.4,
            base_intensity: 100.0,
            smooth_std: 10.0,
            noise_std: 5.0,
            region_centre: [0.35, 0.45, 0.35],
            region_radius: [0.12, 0.12, 0.12],
            distractors: 12,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Splits each per-split total into `ceil(n/2)` converters and `floor(n/2)` stable.
    pub fn with_split_totals(mut self, totals: [usize; 3]) -> Self {
        self.converters = totals.map(|n| n.div_ceil(2));
        self.stable = totals.map(|n| n / 2);
        self
    }

    pub fn subject_count(&self) -> usize {
        self.stable.iter().sum::<usize>() + self.converters.iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, split) in Split::ALL.iter().enumerate() {
            if self.stable[i] == 0 || self.converters[i] == 0 {
                return Err(Error::Config(format!(
                    "split {split} needs at least one subject per class"
                )));
            }
        }
        for a in 0..3 {
            let r = self.region_radius[a] * self.dims[a] as f64;
            if r < 1.0 || self.dims[a] < 8 {
                return Err(Error::Config(format!(
                    "extent {} too small for the signal region (semi-axis {r:.2} voxels)",
                    self.dims[a]
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.single_modality_fraction) {
            return Err(Error::Config("single_modality_fraction must lie in [0, 1]".into()));
        }
        if !self.amplitude.is_finite() || self.amplitude < 0.0 {
            return Err(Error::Config("amplitude must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn brain(&self, x: usize, y: usize, z: usize) -> bool {
        ellipsoid(self.dims, [x, y, z], [0.5; 3], [0.45; 3])
    }

    /// Whether a voxel lies in the signal region.
    pub fn in_region(&self, x: usize, y: usize, z: usize) -> bool {
        ellipsoid(self.dims, [x, y, z], self.region_centre, self.region_radius)
    }
}

fn ellipsoid(dims: [usize; 3], p: [usize; 3], centre: [f64; 3], radius: [f64; 3]) -> bool {
    (0..3)
        .map(|a| {
            let d = (p[a] as f64 + 0.5) / dims[a] as f64 - centre[a];
            (d / radius[a]).powi(2)
        })
        .sum::<f64>()
        <= 1.0
}

/// Which modalities of a subject carry the signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SignalSites {
    pub mri: bool,
    pub pet: bool,
}

impl SignalSites {
    pub const NONE: SignalSites = SignalSites { mri: false, pet: false };
    pub const BOTH: SignalSites = SignalSites { mri: true, pet: true };

    fn has(self, m: Modality) -> bool {
        match m {
            Modality::Mri => self.mri,
            Modality::Pet => self.pet,
        }
    }
}

/// A planned subject before any volume is generated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSubject {
    pub id: String,
    pub index: usize,
    pub label: u8,
    pub split: Split,
    pub signal: SignalSites,
}

pub fn plan_subjects(cfg: &SynthConfig) -> Result<Vec<SynthSubject>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(cfg.seed, "plan", 0));
    let mut out = Vec::new();
    for (si, &split) in Split::ALL.iter().enumerate() {
        let n_conv = cfg.converters[si];
        let single = (cfg.single_modality_fraction * n_conv as f64).round() as usize;
        let mut sites: Vec<SignalSites> = (0..n_conv)
            .map(|i| match i {
                i if i < single / 2 => SignalSites { mri: true, pet: false },
                i if i < single => SignalSites { mri: false, pet: true },
                _ => SignalSites::BOTH,
            })
            .collect();
        sites.shuffle(&mut rng);
        let mut labels: Vec<(u8, SignalSites)> = sites.into_iter().map(|s| (1, s)).collect();
        labels.extend(std::iter::repeat_n((0, SignalSites::NONE), cfg.stable[si]));
        labels.shuffle(&mut rng);
        for (label, signal) in labels {
            let index = out.len();
            out.push(SynthSubject {
                id: format!("SUB{:04}", index + 1),
                index,
                label,
                split,
                signal,
            });
        }
    }
    Ok(out)
}

/// `(MRI, PET)` for one planned subject. PET is the duration-weighted average of three noisy frames.
pub fn generate_pair(cfg: &SynthConfig, s: &SynthSubject) -> Result<(Volume, Volume)> {
    let mut out = Vec::with_capacity(2);
    for m in Modality::BOTH {
        let tag = match m {
            Modality::Mri => "mri",
            Modality::Pet => "pet",
        };
        let seed = derive_indexed(cfg.seed, tag, s.index as u64);
        let smooth = DisplacementField::sample(cfg.dims, seed, 4, cfg.smooth_std)?;
        let offset = match (m, s.signal.has(m)) {
            (_, false) => 0.0,
            (Modality::Mri, true) => -cfg.amplitude,
            (Modality::Pet, true) => cfg.amplitude,
        };
        let clean = Volume::from_fn(cfg.dims, m, &s.id, |x, y, z| {
            if !cfg.brain(x, y, z) {
                return 0.0;
            }
            let mut v = cfg.base_intensity + smooth.at([x, y, z])[0] as f32;
            if cfg.in_region(x, y, z) {
                v += offset;
            }
            v
        });
        let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut noisy = |scale: f64| -> Result<Volume> {
            let voxels = clean
                .voxels()
                .iter()
                .map(|&c| {
                    let n = noise.sample(&mut rng) * scale;
                    if c == 0.0 {
                        0.0
                    } else {
                        // stay strictly inside the brain mask
                        let v = c + n as f32;
                        if v == 0.0 {
                            f32::MIN_POSITIVE
                        } else {
                            v
                        }
                    }
                })
                .collect();
            clean.with_voxels(voxels)
        };
        let vol = match m {
            Modality::Mri => noisy(1.0)?,
            Modality::Pet => {
                // averaging three frames with weights 1:2:5 has noise std
                // sqrt(1+4+25)/8 per unit frame noise; rescale so the result matches noise_std
                let frame_scale = 8.0 / 30f64.sqrt();
                let frames = vec![noisy(frame_scale)?, noisy(frame_scale)?, noisy(frame_scale)?];
                temporal_average(&FrameSequence::new(frames, vec![60.0, 120.0, 300.0])?)?
            }
        };
        out.push(vol);
    }
    let pet = out.pop().unwrap();
    let mri = out.pop().unwrap();
    Ok((mri, pet))
}

fn subject_record(cfg: &SynthConfig, s: &SynthSubject) -> SubjectRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(cfg.seed, "record", s.index as u64));
    let mut r = SubjectRecord::new(&s.id)
        .diagnosis(0, Diagnosis::Cn)
        .scan(rng.gen_range(0..=SCAN_WINDOW_DAYS / 2), Modality::Mri)
        .scan(rng.gen_range(0..=SCAN_WINDOW_DAYS), Modality::Pet);
    if s.label == 1 {
        let day = rng.gen_range(SCAN_WINDOW_DAYS..=DAYS_PER_DECADE);
        let dx = if rng.gen_bool(0.7) { Diagnosis::Mci } else { Diagnosis::Ad };
        r = r.diagnosis(day / 2, Diagnosis::Cn).diagnosis(day, dx);
    } else {
        r = r
            .diagnosis(rng.gen_range(1000..DAYS_PER_DECADE), Diagnosis::Cn)
            .diagnosis(rng.gen_range(DAYS_PER_DECADE..=DAYS_PER_DECADE + 1500), Diagnosis::Cn);
    }
    // a later out-of-window rescan is ignored by selection
    r = r.scan(rng.gen_range(SCAN_WINDOW_DAYS + 1..2000), Modality::Mri);
    r.sort_events();
    r
}

/// Records that must be excluded, cycling through the failure modes.
fn distractor_record(cfg: &SynthConfig, i: usize) -> SubjectRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(cfg.seed, "distractor", i as u64));
    let id = format!("EXC{:04}", i + 1);
    let mut r = match i % 4 {
        // scans outside the baseline window
        0 => SubjectRecord::new(id)
            .diagnosis(0, Diagnosis::Cn)
            .scan(rng.gen_range(SCAN_WINDOW_DAYS + 1..900), Modality::Mri)
            .scan(rng.gen_range(SCAN_WINDOW_DAYS + 1..900), Modality::Pet)
            .diagnosis(2000, Diagnosis::Mci),
        // impaired at baseline
        1 => SubjectRecord::new(id)
            .diagnosis(0, Diagnosis::Mci)
            .scan(10, Modality::Mri)
            .scan(20, Modality::Pet),
        // follow-up too short to call stable
        2 => SubjectRecord::new(id)
            .diagnosis(0, Diagnosis::Cn)
            .scan(10, Modality::Mri)
            .scan(20, Modality::Pet)
            .diagnosis(rng.gen_range(400..DAYS_PER_DECADE), Diagnosis::Cn),
        // PET missing
        _ => SubjectRecord::new(id)
            .diagnosis(0, Diagnosis::Cn)
            .scan(10, Modality::Mri)
            .diagnosis(1500, Diagnosis::Ad),
    };
    r.sort_events();
    r
}

/// Clinical record table for a cohort plan, distractors included.
pub fn synth_records(cfg: &SynthConfig, subjects: &[SynthSubject]) -> Vec<SubjectRecord> {
    let mut out: Vec<SubjectRecord> = subjects.iter().map(|s| subject_record(cfg, s)).collect();
    out.extend((0..cfg.distractors).map(|i| distractor_record(cfg, i)));
    out
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub records_path: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<SubjectRecord>,
    pub subjects: Vec<SynthSubject>,
}

/// Writes `volumes/*.mnav`, `manifest.tsv` and `records.tsv` under `out_dir`.
pub fn generate_synthetic_cohort(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthOutput> {
    let subjects = plan_subjects(cfg)?;
    let records = synth_records(cfg, &subjects);
    let selected = select_cohort(&records, 10)?;
    let mut expected: Vec<(String, u8)> = subjects.iter().map(|s| (s.id.clone(), s.label)).collect();
    expected.sort();
    if selected != expected {
        return Err(Error::Validation("synthetic records disagree with the cohort plan".into()));
    }

    let vol_dir = out_dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let rows: Vec<Vec<ManifestRow>> = subjects
        .par_iter()
        .map(|s| -> Result<Vec<ManifestRow>> {
            let (mri, pet) = generate_pair(cfg, s)?;
            let mut rows = Vec::with_capacity(2);
            for v in [mri, pet] {
                let path = vol_dir.join(format!("{}_{}.mnav", s.id, v.modality.tag()));
                write_volume(&path, &v)?;
                rows.push(ManifestRow {
                    subject_id: s.id.clone(),
                    modality: v.modality,
                    path,
                    label: s.label,
                    split: s.split,
                });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        rows: rows.into_iter().flatten().collect(),
    };
    let manifest_path = out_dir.join("manifest.tsv");
    manifest.write(&manifest_path)?;
    let records_path = out_dir.join("records.tsv");
    super::cohort::write_records(&records_path, &records)?;
    log::info!(
        "wrote {} subjects ({} distractor records) to {}",
        subjects.len(),
        cfg.distractors,
        out_dir.display()
    );
    Ok(SynthOutput {
        manifest_path,
        records_path,
        manifest,
        records,
        subjects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            dims: [16, 20, 16],
            seed: 3,
            ..SynthConfig::default()
        }
        .with_split_totals([6, 2, 2])
    }

    #[test]
    fn split_totals() {
        let c = SynthConfig::default().with_split_totals([40, 10, 10]);
        assert_eq!(c.converters, [20, 5, 5]);
        assert_eq!(c.stable, [20, 5, 5]);
        let c = SynthConfig::default().with_split_totals([5, 3, 3]);
        assert_eq!(c.converters, [3, 2, 2]);
        assert_eq!(c.stable, [2, 1, 1]);
        assert_eq!(SynthConfig::default().subject_count(), 204);
    }

    #[test]
    fn rejects_empty_class_and_tiny_dims() {
        assert!(plan_subjects(&SynthConfig::default().with_split_totals([4, 1, 2])).is_err());
        let tiny = SynthConfig {
            dims: [6, 6, 6],
            ..small()
        };
        assert!(plan_subjects(&tiny).is_err());
    }

    #[test]
    fn plan_counts_and_single_modality_share() {
        let cfg = SynthConfig::default();
        let plan = plan_subjects(&cfg).unwrap();
        assert_eq!(plan.len(), 204);
        let conv: Vec<_> = plan.iter().filter(|s| s.label == 1).collect();
        assert_eq!(conv.len(), 104);
        let single = conv.iter().filter(|s| s.signal != SignalSites::BOTH).count();
        // 0.4 of 62, 21, 21 rounded per split
        assert_eq!(single, 25 + 8 + 8);
        assert!(plan.iter().filter(|s| s.label == 0).all(|s| s.signal == SignalSites::NONE));
    }

    #[test]
    fn signal_direction_per_modality() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            smooth_std: 0.0,
            ..small()
        };
        let s = SynthSubject {
            id: "x".into(),
            index: 0,
            label: 1,
            split: Split::Train,
            signal: SignalSites::BOTH,
        };
        let (mri, pet) = generate_pair(&cfg, &s).unwrap();
        let [dx, dy, dz] = cfg.dims;
        let mut seen = 0;
        for z in 0..dz {
            for y in 0..dy {
                for x in 0..dx {
                    if cfg.in_region(x, y, z) {
                        assert!((mri.get(x, y, z) - 70.0).abs() < 1e-3);
                        assert!((pet.get(x, y, z) - 130.0).abs() < 1e-3);
                        seen += 1;
                    }
                }
            }
        }
        assert!(seen > 0);
    }
}
