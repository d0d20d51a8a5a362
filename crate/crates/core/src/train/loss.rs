//! Binary cross-entropy on plain slices (the tape has its own differentiable op).

use crate::error::{Error, Result};
use crate::tensor::{clamp_prob, Scalar};

/// Mean of `-[y·ln p + (1-y)·ln(1-p)]` with `p` clamped away from 0 and 1.
pub fn bce_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::dim("bce_loss", &[pred.len()], &[target.len()]));
    }
    let total: T = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        })
        .sum();
    Ok(total / T::of(pred.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_is_ln2() {
        for y in [0.0, 1.0] {
            let l = bce_loss(&[0.5f64], &[y]).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn clamp_bounds_perfect_predictions() {
        let l = bce_loss(&[1.0f64, 0.0], &[1.0, 0.0]).unwrap();
        assert!(l <= -(1.0f64 - 1e-7).ln() + 1e-15);
        assert!(l > 0.0);
    }

    #[test]
    fn length_mismatch() {
        assert!(bce_loss(&[0.5f32], &[1.0, 0.0]).is_err());
        assert!(bce_loss::<f32>(&[], &[]).is_err());
    }
}
