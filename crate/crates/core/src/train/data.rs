use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One training example: one tensor per model input slot.
#[derive(Clone, Debug)]
pub struct Sample {
    pub key: String,
    pub inputs: Vec<Arc<Tensor<f32>>>,
    pub label: f32,
}

/// Samples with a fixed slot count and per-slot shapes.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new() -> Self {
        Dataset::default()
    }

    pub fn push(&mut self, key: impl Into<String>, inputs: Vec<Arc<Tensor<f32>>>, label: f32) -> Result<()> {
        if let Some(first) = self.samples.first() {
            let same = first.inputs.len() == inputs.len()
                && first.inputs.iter().zip(&inputs).all(|(a, b)| a.shape() == b.shape());
            if !same {
                let shapes = |s: &[Arc<Tensor<f32>>]| s.iter().flat_map(|t| t.shape().to_vec()).collect::<Vec<_>>();
                return Err(Error::dim("dataset", &shapes(&first.inputs), &shapes(&inputs)));
            }
        }
        if label != 0.0 && label != 1.0 {
            return Err(Error::Validation(format!("label must be 0 or 1, got {label}")));
        }
        self.samples.push(Sample {
            key: key.into(),
            inputs,
            label,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn slots(&self) -> usize {
        self.samples.first().map_or(0, |s| s.inputs.len())
    }

    pub fn labels(&self) -> Vec<f32> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Per-slot tensors `[n, ..sample shape]` for the samples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<Vec<Tensor<f32>>> {
        (0..self.slots())
            .map(|slot| {
                let first = &self.samples[indices[0]].inputs[slot];
                let mut shape = vec![indices.len()];
                shape.extend_from_slice(first.shape());
                let mut data = Vec::with_capacity(indices.len() * first.numel());
                for &i in indices {
                    data.extend_from_slice(self.samples[i].inputs[slot].data());
                }
                Tensor::new(shape, data)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_stack_along_new_axis() {
        let mut d = Dataset::new();
        for i in 0..3 {
            let t = Tensor::new(vec![2], vec![i as f32, 10.0 + i as f32]).unwrap();
            d.push(format!("s{i}"), vec![Arc::new(t)], (i % 2) as f32).unwrap();
        }
        let b = d.batch(&[2, 0]).unwrap();
        assert_eq!(b[0].shape(), &[2, 2]);
        assert_eq!(b[0].data(), &[2.0, 12.0, 0.0, 10.0]);
        assert!(d.push("bad", vec![Arc::new(Tensor::zeros(vec![3]))], 0.0).is_err());
        assert!(d.push("bad", vec![Arc::new(Tensor::zeros(vec![2]))], 0.5).is_err());
    }
}
