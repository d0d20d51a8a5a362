//! Multimodal fusion model and the patch-fusion classifier.

use crate::error::{Error, Result};
use crate::layers::{Dense, Forward, MultiHeadAttention, MultiHeadAttentionConfig, ParamBuilder};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionKind {
    /// Multi-head self-attention over the (MRI, PET) token pair.
    Attention,
    /// Ablation: a dense layer of matching width in place of attention.
    Dense,
}

impl FusionKind {
    pub fn tag(self) -> &'static str {
        match self {
            FusionKind::Attention => "attention",
            FusionKind::Dense => "dense",
        }
    }
}

#[derive(Clone, Debug)]
enum Mixer {
    Attention(MultiHeadAttention),
    Dense(Dense),
}

/// Stacks the two modality features into a 2-token sequence, mixes them
/// (attention or dense), flattens, then dense + ReLU to the `G`-wide fusion
/// feature and dense + sigmoid to a probability.
#[derive(Clone, Debug)]
pub struct FusionModel {
    mixer: Mixer,
    hidden: Dense,
    head: Dense,
    feature_width: usize,
}

impl FusionModel {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<T>,
        kind: FusionKind,
        feature_width: usize,
        fusion_width: usize,
        heads: usize,
    ) -> Result<Self> {
        let mixer = match kind {
            FusionKind::Attention => Mixer::Attention(MultiHeadAttention::new(
                b,
                "attention",
                MultiHeadAttentionConfig::new(feature_width, heads)?,
            )?),
            FusionKind::Dense => Mixer::Dense(Dense::new(b, "mixer", 2 * feature_width, 2 * feature_width, true)?),
        };
        Ok(FusionModel {
            mixer,
            hidden: Dense::new(b, "hidden", 2 * feature_width, fusion_width, true)?,
            head: Dense::new(b, "head", fusion_width, 1, true)?,
            feature_width,
        })
    }

    pub fn kind(&self) -> FusionKind {
        match self.mixer {
            Mixer::Attention(_) => FusionKind::Attention,
            Mixer::Dense(_) => FusionKind::Dense,
        }
    }

    pub fn attention(&self) -> Option<&MultiHeadAttention> {
        match &self.mixer {
            Mixer::Attention(m) => Some(m),
            Mixer::Dense(_) => None,
        }
    }

    pub fn hidden(&self) -> &Dense {
        &self.hidden
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    fn check(&self, f: &Forward<'_, impl Scalar>, v: Var) -> Result<()> {
        let s = f.tape.shape(v);
        if s.len() != 2 || s[1] != self.feature_width {
            return Err(Error::Dimension {
                op: "fusion_forward",
                lhs: s.to_vec(),
                rhs: vec![self.feature_width],
            });
        }
        Ok(())
    }

    /// Mixed token pair `[n, 2, F]` before flattening.
    pub fn mix<T: Scalar>(&self, f: &mut Forward<'_, T>, mri: Var, pet: Var) -> Result<Var> {
        self.check(f, mri)?;
        self.check(f, pet)?;
        if f.tape.shape(mri) != f.tape.shape(pet) {
            return Err(Error::dim("fusion_forward", f.tape.shape(mri), f.tape.shape(pet)));
        }
        let tokens = f.tape.stack(&[mri, pet], 1)?;
        match &self.mixer {
            Mixer::Attention(mha) => Ok(mha.forward(f, tokens)?.0),
            Mixer::Dense(d) => {
                let n = f.tape.shape(tokens)[0];
                let flat = f.tape.flatten(tokens)?;
                let y = d.forward(f, flat)?;
                f.tape.reshape(y, vec![n, 2, self.feature_width])
            }
        }
    }

    /// `([n] probabilities, [n, G] fusion features)`.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, mri: Var, pet: Var) -> Result<(Var, Var)> {
        let mixed = self.mix(f, mri, pet)?;
        let flat = f.tape.flatten(mixed)?;
        let h = self.hidden.forward(f, flat)?;
        let feature = f.tape.relu(h)?;
        let logit = self.head.forward(f, feature)?;
        let p = f.tape.sigmoid(logit)?;
        let n = f.tape.shape(p)[0];
        Ok((f.tape.reshape(p, vec![n])?, feature))
    }
}

/// Concatenates the per-patch fusion features in grid order, then dense + sigmoid.
#[derive(Clone, Debug)]
pub struct FinalClassifier {
    head: Dense,
    patches: usize,
    width: usize,
}

impl FinalClassifier {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, patches: usize, width: usize) -> Result<Self> {
        Ok(FinalClassifier {
            head: Dense::new(b, "head", patches * width, 1, true)?,
            patches,
            width,
        })
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    /// `features`: one `[n, G]` tensor per patch. Returns `([n] logits, [n, P*G] concatenation)`.
    pub fn logit<T: Scalar>(&self, f: &mut Forward<'_, T>, features: &[Var]) -> Result<(Var, Var)> {
        if features.len() != self.patches {
            return Err(Error::shape(
                "final_forward",
                format!("expected {} patch features, got {}", self.patches, features.len()),
            ));
        }
        for &v in features {
            let s = f.tape.shape(v);
            if s.len() != 2 || s[1] != self.width {
                return Err(Error::Dimension {
                    op: "final_forward",
                    lhs: s.to_vec(),
                    rhs: vec![self.width],
                });
            }
        }
        let cat = f.tape.concat(features, 1)?;
        let logit = self.head.forward(f, cat)?;
        let n = f.tape.shape(logit)[0];
        Ok((f.tape.reshape(logit, vec![n])?, cat))
    }

    /// `([n] probabilities, [n, P*G] concatenated features)`.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, features: &[Var]) -> Result<(Var, Var)> {
        let (logit, cat) = self.logit(f, features)?;
        Ok((f.tape.sigmoid(logit)?, cat))
    }
}
