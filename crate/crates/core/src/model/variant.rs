use std::fmt;
use std::str::FromStr;

use super::{FusionKind, Net, ScaleConfig};
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::volume::patch::PATCH_COUNT;
use crate::volume::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariantKind {
    /// Patches, both modalities, attention fusion.
    Full,
    /// Patches, both modalities, dense fusion.
    NoAttention,
    /// Whole volumes, both modalities, attention fusion.
    NoPatch,
    UnimodalMri,
    UnimodalPet,
    /// Whole volumes, both modalities, dense fusion.
    NoPatchMultimodal,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        VariantKind::Full,
        VariantKind::NoAttention,
        VariantKind::NoPatch,
        VariantKind::UnimodalMri,
        VariantKind::UnimodalPet,
        VariantKind::NoPatchMultimodal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Full => "full",
            VariantKind::NoAttention => "no_attention",
            VariantKind::NoPatch => "no_patch",
            VariantKind::UnimodalMri => "unimodal_mri",
            VariantKind::UnimodalPet => "unimodal_pet",
            VariantKind::NoPatchMultimodal => "no_patch_multimodal",
        }
    }

    pub fn plan(self) -> VariantPlan {
        use VariantKind::*;
        let (patched, modalities, fusion) = match self {
            Full => (true, Modality::BOTH.to_vec(), Some(FusionKind::Attention)),
            NoAttention => (true, Modality::BOTH.to_vec(), Some(FusionKind::Dense)),
            NoPatch => (false, Modality::BOTH.to_vec(), Some(FusionKind::Attention)),
            NoPatchMultimodal => (false, Modality::BOTH.to_vec(), Some(FusionKind::Dense)),
            UnimodalMri => (false, vec![Modality::Mri], None),
            UnimodalPet => (false, vec![Modality::Pet], None),
        };
        VariantPlan {
            kind: self,
            patched,
            modalities,
            fusion,
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Where a backbone or fusion model looks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    /// Index into the patch grid (x-major enumeration).
    Patch(usize),
    Whole,
}

impl Site {
    fn tag(self) -> String {
        match self {
            Site::Patch(i) => format!("p{i:02}"),
            Site::Whole => "whole".into(),
        }
    }
}

/// Which stage models a variant needs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantPlan {
    pub kind: VariantKind,
    pub patched: bool,
    pub modalities: Vec<Modality>,
    /// `None` for unimodal variants: the backbone head is the classifier.
    pub fusion: Option<FusionKind>,
}

impl VariantPlan {
    pub fn sites(&self) -> Vec<Site> {
        if self.patched {
            (0..PATCH_COUNT).map(Site::Patch).collect()
        } else {
            vec![Site::Whole]
        }
    }

    pub fn stage_count(&self) -> usize {
        if self.fusion.is_some() {
            3
        } else {
            1
        }
    }
}

/// Identity of one stage model; also names its checkpoint file.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ModelHandle {
    Backbone { modality: Modality, site: Site },
    Fusion { kind: FusionKind, site: Site },
    Final { kind: FusionKind, patched: bool },
}

impl ModelHandle {
    pub fn name(&self) -> String {
        match self {
            ModelHandle::Backbone { modality, site } => format!("backbone_{}_{}", modality.tag(), site.tag()),
            ModelHandle::Fusion { kind, site } => format!("fusion_{}_{}", kind.tag(), site.tag()),
            ModelHandle::Final { kind, patched } => {
                format!("final_{}_{}", kind.tag(), if *patched { "patched" } else { "whole" })
            }
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}.mnac", self.name())
    }

    pub fn stage(&self) -> usize {
        match self {
            ModelHandle::Backbone { .. } => 1,
            ModelHandle::Fusion { .. } => 2,
            ModelHandle::Final { .. } => 3,
        }
    }

    /// Freshly initialised model for this handle.
    pub fn instantiate<T: Scalar>(&self, scale: &ScaleConfig, seed: u64) -> Result<Net<T>> {
        match self {
            ModelHandle::Backbone { .. } => Net::backbone(scale.channels, seed),
            ModelHandle::Fusion { kind, .. } => {
                Net::fusion(*kind, scale.feature_width(), scale.fusion_width, scale.heads, seed)
            }
            ModelHandle::Final { patched, .. } => {
                let patches = if *patched { PATCH_COUNT } else { 1 };
                Net::final_stage(patches, scale.fusion_width, seed)
            }
        }
    }
}

/// Stage model handles of a variant, in training order.
#[derive(Clone, Debug)]
pub struct ModelSet {
    pub plan: VariantPlan,
    pub backbones: Vec<ModelHandle>,
    pub fusions: Vec<ModelHandle>,
    pub final_model: Option<ModelHandle>,
}

impl ModelSet {
    pub fn all(&self) -> Vec<&ModelHandle> {
        self.backbones
            .iter()
            .chain(&self.fusions)
            .chain(&self.final_model)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.backbones.len() + self.fusions.len() + usize::from(self.final_model.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The model whose output is the variant's prediction.
    pub fn predictor(&self) -> &ModelHandle {
        self.final_model.as_ref().unwrap_or(&self.backbones[0])
    }
}

pub fn build_variant(kind: VariantKind, scale: &ScaleConfig) -> Result<ModelSet> {
    scale.validate()?;
    let plan = kind.plan();
    let sites = plan.sites();
    let mut backbones = Vec::new();
    for &modality in &plan.modalities {
        for &site in &sites {
            backbones.push(ModelHandle::Backbone { modality, site });
        }
    }
    let (fusions, final_model) = match plan.fusion {
        Some(kind) => (
            sites.iter().map(|&site| ModelHandle::Fusion { kind, site }).collect(),
            Some(ModelHandle::Final {
                kind,
                patched: plan.patched,
            }),
        ),
        None => (Vec::new(), None),
    };
    Ok(ModelSet {
        plan,
        backbones,
        fusions,
        final_model,
    })
}
