//! Patience-based early stopping on validation loss.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Improved,
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: None,
            stale: 0,
        }
    }

    /// Records the validation loss of `epoch` (1-based). An epoch improves if its
    /// loss beats the best so far by more than `min_delta`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> Result<Decision> {
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("validation loss {loss} at epoch {epoch}")));
        }
        match self.best {
            Some((_, best)) if loss >= best - self.min_delta => {
                self.stale += 1;
                Ok(if self.stale >= self.patience {
                    Decision::Stop
                } else {
                    Decision::Continue
                })
            }
            _ => {
                self.best = Some((epoch, loss));
                self.stale = 0;
                Ok(Decision::Improved)
            }
        }
    }

    /// `(epoch, loss)` of the best epoch so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Runs `epoch_fn(epoch)` for epochs `1..=max_epochs`, each returning the validation
/// loss, until patience runs out. `on_improve` fires after each improving epoch.
/// Returns `(epochs_run, best_epoch, best_loss)`.
pub fn run_epochs(
    max_epochs: usize,
    patience: usize,
    min_delta: f64,
    mut epoch_fn: impl FnMut(usize) -> Result<f64>,
    mut on_improve: impl FnMut(usize),
) -> Result<(usize, usize, f64)> {
    if max_epochs == 0 {
        return Err(Error::Config("max_epochs must be positive".into()));
    }
    let mut stop = EarlyStopping::new(patience, min_delta);
    let mut run = 0;
    for epoch in 1..=max_epochs {
        let loss = epoch_fn(epoch)?;
        run = epoch;
        match stop.observe(epoch, loss)? {
            Decision::Improved => on_improve(epoch),
            Decision::Continue => {}
            Decision::Stop => break,
        }
    }
    let (best_epoch, best_loss) = stop.best().expect("at least one epoch ran");
    Ok((run, best_epoch, best_loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_stops_after_patience_plus_one() {
        let (run, best, _) = run_epochs(1000, 20, 1e-6, |_| Ok(0.7), |_| {}).unwrap();
        assert_eq!(run, 21);
        assert_eq!(best, 1);
    }

    #[test]
    fn improving_forever_runs_to_max() {
        let (run, best, loss) = run_epochs(50, 20, 1e-6, |e| Ok(1.0 / e as f64), |_| {}).unwrap();
        assert_eq!((run, best), (50, 50));
        assert!((loss - 0.02).abs() < 1e-12);
    }

    #[test]
    fn tiny_improvements_do_not_count() {
        let mut s = EarlyStopping::new(2, 1e-6);
        assert_eq!(s.observe(1, 1.0).unwrap(), Decision::Improved);
        assert_eq!(s.observe(2, 1.0 - 5e-7).unwrap(), Decision::Continue);
        assert_eq!(s.observe(3, 0.5).unwrap(), Decision::Improved);
        assert_eq!(s.observe(4, 0.6).unwrap(), Decision::Continue);
        assert_eq!(s.observe(5, 0.6).unwrap(), Decision::Stop);
        assert_eq!(s.best(), Some((3, 0.5)));
    }

    #[test]
    fn nan_is_divergence() {
        let mut s = EarlyStopping::new(2, 0.0);
        assert!(matches!(s.observe(1, f64::NAN), Err(Error::Diverged(_))));
    }
}
