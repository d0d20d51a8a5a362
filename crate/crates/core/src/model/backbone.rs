//! 3D ResNet-10 patch backbone.

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv3d, Dense, Forward, ParamBuilder};
use crate::tensor::{PoolKind, Scalar, Var, Window3};

/// Two 3x3x3 conv + batch-norm layers with a residual connection added before
/// the final ReLU. A 1x1x1 projection (conv + batch norm) replaces the identity
/// shortcut whenever stride or channel count changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv3d,
    bn1: BatchNorm,
    conv2: Conv3d,
    bn2: BatchNorm,
    shortcut: Option<(Conv3d, BatchNorm)>,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 = Conv3d::new(b, &format!("{name}.conv1"), c_in, c_out, Window3::cube(3, stride, 1))?;
        let bn1 = BatchNorm::new(b, &format!("{name}.bn1"), c_out)?;
        let conv2 = Conv3d::new(b, &format!("{name}.conv2"), c_out, c_out, Window3::cube(3, 1, 1))?;
        let bn2 = BatchNorm::new(b, &format!("{name}.bn2"), c_out)?;
        let shortcut = if stride != 1 || c_in != c_out {
            Some((
                Conv3d::new(b, &format!("{name}.shortcut"), c_in, c_out, Window3::cube(1, stride, 0))?,
                BatchNorm::new(b, &format!("{name}.shortcut_bn"), c_out)?,
            ))
        } else {
            None
        };
        Ok(ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })
    }

    pub fn has_projection(&self) -> bool {
        self.shortcut.is_some()
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(f, x)?;
        let y = self.bn1.forward(f, y)?;
        let y = f.tape.relu(y)?;
        let y = self.conv2.forward(f, y)?;
        let y = self.bn2.forward(f, y)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(f, x)?;
                bn.forward(f, s)?
            }
            None => x,
        };
        let sum = f.tape.add(y, skip)?;
        f.tape.relu(sum)
    }
}

pub const BLOCK_STRIDES: [usize; 4] = [1, 2, 2, 2];

/// Stem (7^3 conv stride 2 pad 3, max pool 3/2/1, batch norm, ReLU), four
/// residual blocks, global mean pool to an `F`-wide feature, dense + sigmoid head.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv3d,
    stem_bn: BatchNorm,
    blocks: Vec<ResidualBlock>,
    head: Dense,
    feature_width: usize,
}

pub const STEM_WINDOW: Window3 = Window3 {
    kernel: [7; 3],
    stride: [2; 3],
    padding: [3; 3],
};
pub const STEM_POOL: Window3 = Window3 {
    kernel: [3; 3],
    stride: [2; 3],
    padding: [1; 3],
};

fn at_layer(layer: &str, e: Error) -> Error {
    Error::Shape {
        op: "backbone",
        msg: format!("layer {layer}: {e}"),
    }
}

impl Backbone {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, in_channels: usize, channels: [usize; 4]) -> Result<Self> {
        let stem = Conv3d::new(b, "stem.conv", in_channels, channels[0], STEM_WINDOW)?;
        let stem_bn = BatchNorm::new(b, "stem.bn", channels[0])?;
        let mut blocks = Vec::with_capacity(4);
        let mut c_in = channels[0];
        for (i, (&c_out, &stride)) in channels.iter().zip(&BLOCK_STRIDES).enumerate() {
            blocks.push(ResidualBlock::new(b, &format!("conv_block_{}", i + 1), c_in, c_out, stride)?);
            c_in = c_out;
        }
        let head = Dense::new(b, "head", channels[3], 1, true)?;
        Ok(Backbone {
            stem,
            stem_bn,
            blocks,
            head,
            feature_width: channels[3],
        })
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    /// Feature extractor only: `[n, c, d, h, w]` to `[n, F]`.
    pub fn features<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.stem.forward(f, x).map_err(|e| at_layer("stem", e))?;
        f.record("stem", y);
        let y = f
            .tape
            .pool3d(y, PoolKind::Max, STEM_POOL)
            .map_err(|e| at_layer("stem_pool", e))?;
        f.record("stem_pool", y);
        let y = self.stem_bn.forward(f, y)?;
        let mut y = f.tape.relu(y)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let name = format!("conv_block_{}", i + 1);
            y = block.forward(f, y).map_err(|e| at_layer(&name, e))?;
            f.record(name, y);
        }
        let s = f.tape.shape(y).to_vec();
        let spatial = [s[2], s[3], s[4]];
        let win = Window3 {
            kernel: spatial,
            stride: spatial,
            padding: [0; 3],
        };
        let pooled = f.tape.pool3d(y, PoolKind::Mean, win)?;
        let feature = f.tape.reshape(pooled, vec![s[0], s[1]])?;
        f.record("global_pool", feature);
        Ok(feature)
    }

    /// `x: [n, c, d, h, w]` to `([n] probabilities, [n, F] features)`.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<(Var, Var)> {
        if f.tape.shape(x).len() != 5 {
            return Err(at_layer(
                "input",
                Error::shape("backbone", format!("expected [n, c, d, h, w], got {:?}", f.tape.shape(x))),
            ));
        }
        let feature = self.features(f, x)?;
        let logit = self.head.forward(f, feature)?;
        let p = f.tape.sigmoid(logit)?;
        let n = f.tape.shape(p)[0];
        let prob = f.tape.reshape(p, vec![n])?;
        Ok((prob, feature))
    }
}
