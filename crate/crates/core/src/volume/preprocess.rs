//! PET temporal averaging and intensity normalisation.

use super::Volume;
use crate::error::{Error, Result};

/// Dynamic acquisition: frames plus their durations in seconds.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    frames: Vec<Volume>,
    durations: Vec<f64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Volume>, durations: Vec<f64>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Validation("empty frame sequence".into()));
        }
        if frames.len() != durations.len() {
            return Err(Error::Validation(format!(
                "{} frames but {} durations",
                frames.len(),
                durations.len()
            )));
        }
        if let Some(d) = durations.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(Error::Validation(format!("frame duration {d} is not positive")));
        }
        let dims = frames[0].dims();
        if let Some(f) = frames.iter().find(|f| f.dims() != dims) {
            return Err(Error::dim("temporal_average", &dims, &f.dims()));
        }
        Ok(FrameSequence { frames, durations })
    }

    pub fn frames(&self) -> &[Volume] {
        &self.frames
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }
}

/// Voxelwise `Σ dᵢ·frameᵢ / Σ dᵢ`.
pub fn temporal_average(seq: &FrameSequence) -> Result<Volume> {
    let first = &seq.frames[0];
    let total: f64 = seq.durations.iter().sum();
    let mut acc = vec![0f64; first.voxels().len()];
    for (frame, &d) in seq.frames.iter().zip(&seq.durations) {
        for (a, &x) in acc.iter_mut().zip(frame.voxels()) {
            *a += d * x as f64;
        }
    }
    first.with_voxels(acc.into_iter().map(|a| (a / total) as f32).collect())
}

/// Z-score over nonzero voxels; zero voxels stay zero.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    let (mut n, mut sum) = (0usize, 0f64);
    for &x in v.voxels() {
        if x != 0.0 {
            n += 1;
            sum += x as f64;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate(format!(
            "{} {} volume has no nonzero voxels",
            v.subject_id, v.modality
        )));
    }
    let mean = sum / n as f64;
    let var = v
        .voxels()
        .iter()
        .filter(|x| **x != 0.0)
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    if var <= 0.0 {
        return Err(Error::Degenerate(format!(
            "{} {} volume has constant brain intensity",
            v.subject_id, v.modality
        )));
    }
    let std = var.sqrt();
    let out = v
        .voxels()
        .iter()
        .map(|&x| {
            if x == 0.0 {
                0.0
            } else {
                let z = ((x as f64 - mean) / std) as f32;
                // keep the mask: a voxel landing exactly on the mean stays inside it
                if z == 0.0 {
                    f32::MIN_POSITIVE
                } else {
                    z
                }
            }
        })
        .collect();
    v.with_voxels(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;

    fn constant(c: f32) -> Volume {
        Volume::filled([2, 2, 2], c, Modality::Pet, "s")
    }

    #[test]
    fn averages() {
        let seq = FrameSequence::new(vec![constant(3.0), constant(3.0)], vec![5.0, 60.0]).unwrap();
        assert!(temporal_average(&seq).unwrap().voxels().iter().all(|&x| x == 3.0));
        let seq = FrameSequence::new(vec![constant(0.0), constant(1.0)], vec![5.0, 5.0]).unwrap();
        assert!(temporal_average(&seq).unwrap().voxels().iter().all(|&x| x == 0.5));
        let seq = FrameSequence::new(vec![constant(1.0), constant(4.0)], vec![5.0, 20.0]).unwrap();
        // (5·1 + 20·4) / 25
        assert!(temporal_average(&seq)
            .unwrap()
            .voxels()
            .iter()
            .all(|&x| (x - 3.4).abs() < 1e-6));
    }

    #[test]
    fn frame_sequence_validation() {
        let odd = Volume::filled([2, 2, 3], 0.0, Modality::Pet, "s");
        assert!(FrameSequence::new(vec![constant(1.0), odd], vec![1.0, 1.0]).is_err());
        assert!(FrameSequence::new(vec![constant(1.0)], vec![1.0, 1.0]).is_err());
        assert!(FrameSequence::new(vec![constant(1.0)], vec![0.0]).is_err());
        assert!(FrameSequence::new(vec![], vec![]).is_err());
    }

    #[test]
    fn two_point_zscore() {
        let v = Volume::new([4, 1, 1], vec![0.0, 2.0, 4.0, 0.0], Modality::Mri, "s").unwrap();
        let n = normalize_intensity(&v).unwrap();
        assert_eq!(n.voxels(), &[0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn all_zero_is_degenerate() {
        assert!(matches!(normalize_intensity(&constant(0.0)), Err(Error::Degenerate(_))));
    }
}
