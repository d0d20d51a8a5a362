//! Mini-batch training with early stopping, and batched inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::Dataset;
use super::early_stop::run_epochs;
use super::loss::bce_loss;
use super::optim::SgdMomentum;
use crate::error::{Error, Result};
use crate::layers::{Forward, Mode, Model};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Minimum validation-loss decrease that counts as improvement.
    pub min_delta: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn with(learning_rate: f64, batch_size: usize) -> Self {
        TrainConfig {
            learning_rate,
            momentum: 0.9,
            batch_size,
            max_epochs: 1000,
            patience: 20,
            min_delta: 1e-6,
            seed: 0,
        }
    }

    pub fn patch_stage() -> Self {
        Self::with(1e-3, 16)
    }

    pub fn attention_stage() -> Self {
        Self::with(1e-3, 16)
    }

    pub fn final_stage() -> Self {
        Self::with(1e-4, 10)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        Ok(())
    }

    /// Stable text form, used for run fingerprints.
    pub fn describe(&self) -> String {
        format!(
            "lr={} momentum={} batch={} max_epochs={} patience={} min_delta={} seed={}",
            self.learning_rate,
            self.momentum,
            self.batch_size,
            self.max_epochs,
            self.patience,
            self.min_delta,
            self.seed
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochStats>,
}

fn diverged(name: &str, epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged(format!("{name}: epoch {epoch}: non-finite value in {op}")),
        Error::Diverged(msg) => Error::Diverged(format!("{name}: {msg}")),
        other => other,
    }
}

/// One SGD step on the samples at `indices`; returns the batch loss.
fn train_step<M: Model<f32>>(model: &mut M, opt: &mut SgdMomentum<f32>, data: &Dataset, indices: &[usize]) -> Result<f64> {
    let inputs = data.batch(indices)?;
    let targets: Vec<f32> = indices.iter().map(|&i| data.samples()[i].label).collect();
    let (loss, grads, updates) = {
        let mut f = Forward::new(model.params(), Mode::Train, true);
        let vars = inputs
            .into_iter()
            .map(|t| f.tape.constant(t))
            .collect::<Result<Vec<_>>>()?;
        let out = model.forward(&mut f, &vars)?;
        let loss = f.tape.bce(out.prob, &targets)?;
        f.tape.backward(loss)?;
        let value = f.tape.value(loss).data()[0] as f64;
        let grads = f.param_grads();
        (value, grads, f.into_updates())
    };
    opt.step(model.params_mut(), &grads)?;
    for (id, value) in updates {
        *model.params_mut().value_mut(id) = value;
    }
    Ok(loss)
}

/// Trains `model` in place and leaves it holding the best-validation-loss parameters.
pub fn train_model<M: Model<f32>>(
    model: &mut M,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    name: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation(format!("{name}: empty train or validation split")));
    }
    let mut opt = SgdMomentum::new(cfg.learning_rate as f32, cfg.momentum as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.params().clone();
    let mut history = Vec::new();
    let val_targets = val.labels();

    let (epochs_run, best_epoch, best_val_loss) = {
        let model = &mut *model;
        let history = &mut history;
        let best = &mut best;
        // the improve callback needs the model too, so snapshots go through a cell
        let snapshot = std::cell::Cell::new(false);
        let result = run_epochs(
            cfg.max_epochs,
            cfg.patience,
            cfg.min_delta,
            |epoch| {
                if snapshot.replace(false) {
                    *best = model.params().clone();
                }
                order.shuffle(&mut rng);
                let mut total = 0.0;
                for chunk in order.chunks(cfg.batch_size) {
                    let l = train_step(model, &mut opt, train, chunk).map_err(|e| diverged(name, epoch, e))?;
                    if !l.is_finite() {
                        return Err(Error::Diverged(format!("{name}: epoch {epoch}: training loss {l}")));
                    }
                    total += l * chunk.len() as f64;
                }
                let probs = predict(model, val, cfg.batch_size.max(32))
                    .map_err(|e| diverged(name, epoch, e))?
                    .probs;
                let val_loss = bce_loss(&to_f64(&probs), &to_f64(&val_targets))?;
                let stats = EpochStats {
                    epoch,
                    train_loss: total / train.len() as f64,
                    val_loss,
                };
                log::debug!(
                    "{name}: epoch {epoch} train_loss {:.6} val_loss {:.6}",
                    stats.train_loss,
                    stats.val_loss
                );
                history.push(stats);
                Ok(val_loss)
            },
            |_| snapshot.set(true),
        )?;
        if snapshot.get() {
            *best = model.params().clone();
        }
        result
    };
    *model.params_mut() = best;
    log::info!("{name}: {epochs_run} epochs, best epoch {best_epoch}, val loss {best_val_loss:.6}");
    Ok(TrainOutcome {
        epochs_run,
        best_epoch,
        best_val_loss,
        history,
    })
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Inference outputs, one entry per sample in dataset order.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub probs: Vec<f32>,
    /// `[width]` feature per sample.
    pub features: Vec<Tensor<f32>>,
}

/// Eval-mode forward passes in batches of `batch_size`.
pub fn predict<M: Model<f32> + ?Sized>(model: &M, data: &Dataset, batch_size: usize) -> Result<Prediction> {
    let mut probs = Vec::with_capacity(data.len());
    let mut features = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let inputs = data.batch(chunk)?;
        let mut f = Forward::new(model.params(), Mode::Eval, false);
        let vars = inputs
            .into_iter()
            .map(|t| f.tape.constant(t))
            .collect::<Result<Vec<_>>>()?;
        let out = model.forward(&mut f, &vars)?;
        probs.extend_from_slice(f.tape.value(out.prob).data());
        let feat = f.tape.value(out.feature);
        let width = feat.shape()[1];
        for row in feat.data().chunks(width) {
            features.push(Tensor::new(vec![width], row.to_vec())?);
        }
    }
    Ok(Prediction { probs, features })
}
