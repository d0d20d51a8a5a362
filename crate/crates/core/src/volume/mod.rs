//! Volumes and everything between raw files and model-ready tensors.

pub mod augment;
pub mod codec;
pub mod cohort;
pub mod manifest;
pub mod patch;
pub mod preprocess;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Canonical volume extents after preprocessing.
pub const CANONICAL_DIMS: [usize; 3] = [90, 116, 90];
/// Canonical patch extents.
pub const CANONICAL_PATCH: [usize; 3] = [44, 54, 44];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Mri,
    Pet,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Mri, Modality::Pet];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Mri => "MRI",
            Modality::Pet => "PET",
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Mri => "mri",
            Modality::Pet => "pet",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MRI" | "mri" => Ok(Modality::Mri),
            "PET" | "pet" => Ok(Modality::Pet),
            _ => Err(Error::Validation(format!("unknown modality {s:?}"))),
        }
    }
}

/// One 3D image of one subject. Voxels are stored with x fastest, then y, then z.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxels: Vec<f32>,
    pub modality: Modality,
    pub subject_id: String,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>, modality: Modality, subject_id: impl Into<String>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Validation(format!("volume extents must be positive, got {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if voxels.len() != n {
            return Err(Error::Validation(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                voxels.len()
            )));
        }
        if !voxels.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("volume contains non-finite voxels".into()));
        }
        Ok(Volume {
            dims,
            voxels,
            modality,
            subject_id: subject_id.into(),
        })
    }

    pub fn filled(dims: [usize; 3], value: f32, modality: Modality, subject_id: impl Into<String>) -> Self {
        Volume {
            dims,
            voxels: vec![value; dims.iter().product()],
            modality,
            subject_id: subject_id.into(),
        }
    }

    pub fn from_fn(
        dims: [usize; 3],
        modality: Modality,
        subject_id: impl Into<String>,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut voxels = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Volume {
            dims,
            voxels,
            modality,
            subject_id: subject_id.into(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// Same grid, new values.
    pub fn with_voxels(&self, voxels: Vec<f32>) -> Result<Volume> {
        Volume::new(self.dims, voxels, self.modality, self.subject_id.clone())
    }

    /// Single-channel tensor `[1, z, y, x]` (row-major, so x stays fastest).
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.dims[2], self.dims[1], self.dims[0]], self.voxels.clone())
            .expect("volume invariant guarantees the element count")
    }
}
