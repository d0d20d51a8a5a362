//! Scaled dot-product attention and bias-free multi-head self-attention.

use super::{Forward, ParamBuilder, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// `softmax(Q K^T / sqrt(d_k)) V` over the last two axes (leading axes are batch).
///
/// Returns the attended values and the row-stochastic weight matrix.
pub fn scaled_dot_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (tape.shape(q), tape.shape(k), tape.shape(v));
    let r = qs.len();
    if r < 2 || ks.len() != r || vs.len() != r || qs[r - 1] != ks[r - 1] || ks[r - 2] != vs[r - 2] {
        return Err(Error::Dimension {
            op: "scaled_dot_attention",
            lhs: qs.to_vec(),
            rhs: ks.iter().chain(vs).copied().collect(),
        });
    }
    let d_k = qs[r - 1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, T::one() / T::of(d_k as f64).sqrt())?;
    let weights = tape.softmax(scaled, r - 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiHeadAttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
}

impl MultiHeadAttentionConfig {
    pub fn new(model_dim: usize, heads: usize) -> Result<Self> {
        if model_dim == 0 || heads == 0 || !model_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} attention heads do not divide model width {model_dim}"
            )));
        }
        Ok(MultiHeadAttentionConfig { model_dim, heads })
    }

    pub fn key_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Three `d_model x d_k` projections per head plus the `d_model x d_model` output map.
    pub fn param_count(&self) -> usize {
        3 * self.model_dim * self.key_dim() * self.heads + self.model_dim * self.model_dim
    }
}

#[derive(Clone, Copy, Debug)]
struct HeadProjections {
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

/// Self-attention: every head projects the same input into its own query, key
/// and value spaces; head outputs are concatenated and re-projected by `W^0`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub config: MultiHeadAttentionConfig,
    heads: Vec<HeadProjections>,
    output: ParamId,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<T>,
        name: &str,
        config: MultiHeadAttentionConfig,
    ) -> Result<Self> {
        let (d, dk) = (config.model_dim, config.key_dim());
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            heads.push(HeadProjections {
                query: b.kaiming_uniform(format!("{name}.head{h}.query"), vec![d, dk], d)?,
                key: b.kaiming_uniform(format!("{name}.head{h}.key"), vec![d, dk], d)?,
                value: b.kaiming_uniform(format!("{name}.head{h}.value"), vec![d, dk], d)?,
            });
        }
        let output = b.kaiming_uniform(format!("{name}.output"), vec![d, d], d)?;
        Ok(MultiHeadAttention {
            config,
            heads,
            output,
        })
    }

    /// Parameter ids as `(query, key, value)` per head, then the output projection.
    pub fn param_ids(&self) -> (Vec<(ParamId, ParamId, ParamId)>, ParamId) {
        (
            self.heads.iter().map(|h| (h.query, h.key, h.value)).collect(),
            self.output,
        )
    }

    /// `x: [.., n, d_model]` to `[.., n, d_model]`; also returns each head's weights.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] != self.config.model_dim {
            return Err(Error::Dimension {
                op: "multi_head_attention",
                lhs: shape,
                rhs: vec![self.config.model_dim],
            });
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let wq = f.param(h.query)?;
            let wk = f.param(h.key)?;
            let wv = f.param(h.value)?;
            let q = f.tape.matmul(x, wq)?;
            let k = f.tape.matmul(x, wk)?;
            let v = f.tape.matmul(x, wv)?;
            let (o, w) = scaled_dot_attention(&mut f.tape, q, k, v)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = f.tape.concat(&outs, shape.len() - 1)?;
        let w0 = f.param(self.output)?;
        Ok((f.tape.matmul(cat, w0)?, weights))
    }
}
