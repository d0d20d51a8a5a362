//! SGD with plain (heavy-ball) momentum: `v = μ·v + g`, `θ -= lr·v`.

use crate::error::{Error, Result};
use crate::layers::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(learning_rate: T, momentum: T) -> Self {
        SgdMomentum {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.velocity.get(id.index()).and_then(Option::as_ref)
    }

    /// One update of every parameter listed in `grads`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, g) in grads {
            let slot = id.index();
            if store.value(*id).shape() != g.shape() {
                return Err(Error::dim("sgd_momentum_step", store.value(*id).shape(), g.shape()));
            }
            let v = self.velocity[slot].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            let lr = self.learning_rate;
            for (p, &vi) in store.value_mut(*id).data_mut().iter_mut().zip(v.data()) {
                *p = *p - lr * vi;
            }
        }
        Ok(())
    }
}
