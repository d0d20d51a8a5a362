//! Parametric layers, named parameter stores and the forward-pass context.

mod attention;
mod basic;

pub use attention::{scaled_dot_attention, MultiHeadAttention, MultiHeadAttentionConfig};
pub use basic::{BatchNorm, Conv3d, Dense, BN_EPS, BN_MOMENTUM};

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store's enumeration order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batch-norm scale (gamma).
    Scale,
    /// Batch-norm shift (beta).
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// One named parameter (or running-statistic buffer) of a model.
#[derive(Clone, Debug)]
pub struct LayerParam<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub kind: ParamKind,
}

/// Ordered, uniquely named parameters. Enumeration order is registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<LayerParam<T>>,
    index: HashMap<String, ParamId>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn register(&mut self, name: String, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(LayerParam {
            name,
            value: Arc::new(value),
            kind,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &LayerParam<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &LayerParam<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.kind.trainable())
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.numel())
            .sum()
    }

    /// `(name, tensor)` pairs in enumeration order, buffers included.
    pub fn entries(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), (*p.value).clone()))
            .collect()
    }

    /// Overwrites values by name. Every parameter must be present with its exact shape.
    pub fn load_entries(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor<T>> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.params {
            let t = by_name.get(p.name.as_str()).ok_or_else(|| Error::Missing {
                what: "parameter".into(),
                detail: p.name.clone(),
            })?;
            if t.shape() != p.value.shape() {
                return Err(Error::Dimension {
                    op: "load_entries",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = Arc::new((*t).clone());
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| LayerParam {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    kind: p.kind,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Seeded parameter initialisation. Values are drawn in registration order, so a
/// given (architecture, seed) always yields the same parameters.
pub struct ParamBuilder<T> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
    pub fn kaiming_uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::of(self.rng.gen_range(-bound..bound)));
        self.store.register(name, t, ParamKind::Weight)
    }

    pub fn constant(&mut self, name: String, shape: Vec<usize>, value: f64, kind: ParamKind) -> Result<ParamId> {
        self.store.register(name, Tensor::full(shape, T::of(value)), kind)
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates recorded.
    Train,
    /// Running statistics.
    Eval,
}

/// One forward pass over a model: the tape, lazily bound parameter leaves, and
/// side outputs (running-stat updates, optional shape trace).
pub struct Forward<'p, T: Scalar> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    updates: Vec<(ParamId, Tensor<T>)>,
    trace: Option<Vec<(String, Vec<usize>)>>,
}

impl<'p, T: Scalar> Forward<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        Forward {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            mode,
            track_grads,
            updates: Vec::new(),
            trace: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Tape handle for a parameter, bound on first use.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let p = self.params.get(id);
        let v = self
            .tape
            .leaf_shared(p.value.clone(), self.track_grads && p.kind.trainable())?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Tape handle of an already-bound parameter, if it was used.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub(crate) fn push_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.updates.push((id, value));
    }

    /// Appends the per-sample shape of `v` (batch axis dropped) to the trace.
    pub fn record(&mut self, label: impl Into<String>, v: Var) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push((label.into(), self.tape.shape(v)[1..].to_vec()));
        }
    }

    pub fn trace(&self) -> Option<&[(String, Vec<usize>)]> {
        self.trace.as_deref()
    }

    /// Gradients of all trainable, bound parameters after `tape.backward`; unused
    /// parameters get zero gradients.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.params
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let g = self.bound[id.0]
                    .and_then(|v| self.tape.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.params.value(id).shape().to_vec()));
                (id, g)
            })
            .collect()
    }

    /// Consumes the pass, returning running-stat updates to apply.
    pub fn into_updates(self) -> Vec<(ParamId, Tensor<T>)> {
        self.updates
    }
}

/// Probability and pre-head feature of a stage model, both batched along axis 0.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[n]` sigmoid outputs.
    pub prob: Var,
    /// `[n, width]` features fed to the next stage.
    pub feature: Var,
}

/// A trainable stage model. `inputs` carries one batched tensor per input slot.
pub trait Model<T: Scalar>: Send + Sync {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn forward(&self, f: &mut Forward<'_, T>, inputs: &[Var]) -> Result<ModelOutput>;
}
