//! Stage models and the ablation variants built from them.

mod backbone;
mod fusion;
mod variant;

pub use backbone::{Backbone, ResidualBlock, BLOCK_STRIDES, STEM_POOL, STEM_WINDOW};
pub use fusion::{FinalClassifier, FusionKind, FusionModel};
pub use variant::{build_variant, ModelHandle, ModelSet, Site, VariantKind, VariantPlan};

use crate::error::{Error, Result};
use crate::layers::{Forward, Model, ModelOutput, ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Var};
use crate::volume::{CANONICAL_DIMS, CANONICAL_PATCH};

/// Topology knobs shared by every stage. Presets only change widths and extents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleConfig {
    pub volume_dims: [usize; 3],
    pub patch_dims: [usize; 3],
    /// Output channels of the four residual blocks; the stem uses the first.
    pub channels: [usize; 4],
    /// Width `G` of the fusion feature.
    pub fusion_width: usize,
    pub heads: usize,
}

impl ScaleConfig {
    pub fn paper() -> Self {
        ScaleConfig {
            volume_dims: CANONICAL_DIMS,
            patch_dims: CANONICAL_PATCH,
            channels: [64, 128, 256, 512],
            fusion_width: 128,
            heads: 4,
        }
    }

    pub fn desk() -> Self {
        ScaleConfig {
            volume_dims: [30, 38, 30],
            patch_dims: [14, 18, 14],
            channels: [8, 16, 32, 64],
            fusion_width: 16,
            heads: 4,
        }
    }

    /// Backbone feature width `F` (the last block's channel count).
    pub fn feature_width(&self) -> usize {
        self.channels[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.fusion_width == 0 {
            return Err(Error::Config("channel and fusion widths must be positive".into()));
        }
        if self.heads == 0 || !self.feature_width().is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide feature width {}",
                self.heads,
                self.feature_width()
            )));
        }
        crate::volume::patch::PatchGrid::new(self.volume_dims, self.patch_dims)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Arch {
    Backbone(Backbone),
    Fusion(FusionModel),
    Final(FinalClassifier),
}

/// An architecture together with its parameters.
#[derive(Clone, Debug)]
pub struct Net<T: Scalar> {
    pub arch: Arch,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Net<T> {
    pub fn backbone(channels: [usize; 4], seed: u64) -> Result<Self> {
        let mut b = ParamBuilder::new(seed);
        let arch = Arch::Backbone(Backbone::new(&mut b, 1, channels)?);
        Ok(Net {
            arch,
            params: b.finish(),
        })
    }

    pub fn fusion(kind: FusionKind, feature_width: usize, fusion_width: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut b = ParamBuilder::new(seed);
        let arch = Arch::Fusion(FusionModel::new(&mut b, kind, feature_width, fusion_width, heads)?);
        Ok(Net {
            arch,
            params: b.finish(),
        })
    }

    pub fn final_stage(patches: usize, width: usize, seed: u64) -> Result<Self> {
        let mut b = ParamBuilder::new(seed);
        let arch = Arch::Final(FinalClassifier::new(&mut b, patches, width)?);
        Ok(Net {
            arch,
            params: b.finish(),
        })
    }

    /// Number of input slots `forward` expects.
    pub fn input_slots(&self) -> usize {
        match &self.arch {
            Arch::Backbone(_) => 1,
            Arch::Fusion(_) => 2,
            Arch::Final(fc) => fc.patches(),
        }
    }
}

impl<T: Scalar> Model<T> for Net<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn forward(&self, f: &mut Forward<'_, T>, inputs: &[Var]) -> Result<ModelOutput> {
        if inputs.len() != self.input_slots() {
            return Err(Error::shape(
                "model",
                format!("expected {} inputs, got {}", self.input_slots(), inputs.len()),
            ));
        }
        let (prob, feature) = match &self.arch {
            Arch::Backbone(b) => b.forward(f, inputs[0])?,
            Arch::Fusion(m) => m.forward(f, inputs[0], inputs[1])?,
            Arch::Final(fc) => fc.forward(f, inputs)?,
        };
        Ok(ModelOutput { prob, feature })
    }
}
