//! Central finite-difference checks of the tape's analytic gradients.
//!
//! Each case draws a small random instance per trial, reduces its outputs to a
//! scalar with fixed random weights, and compares the backward pass against
//! `(L(x + h) - L(x - h)) / 2h` at sampled coordinates of every differentiable input.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    Forward, Mode, MultiHeadAttention, MultiHeadAttentionConfig, ParamBuilder, ParamKind, ParamStore,
};
use crate::model::{Backbone, ResidualBlock};
use crate::seed::derive_indexed;
use crate::tensor::{OpKind, PoolKind, Scalar, Tape, Tensor, Var, Window3};

pub const MIN_TRIALS: usize = 50;
/// Coordinates compared per input tensor and trial.
const COORDS_PER_INPUT: usize = 4;
/// Gradients smaller than this are compared absolutely rather than relatively.
const ERROR_FLOOR: f64 = 1e-2;
/// One-sided slopes differing by more than this fraction mark a kink inside the step.
const KINK_RATIO: f64 = 2e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CheckCase {
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Sigmoid,
    MatMul,
    Transpose,
    Dense,
    Softmax,
    Sum,
    Bce,
    Conv3d,
    MaxPool3d,
    MeanPool3d,
    BatchNormTrain,
    BatchNormEval,
    Reshape,
    Concat,
    Stack,
    ConvBlock,
    MultiHeadAttention,
    Backbone,
}

impl CheckCase {
    pub const ALL: [CheckCase; 23] = [
        CheckCase::Add,
        CheckCase::Sub,
        CheckCase::Mul,
        CheckCase::Scale,
        CheckCase::Relu,
        CheckCase::Sigmoid,
        CheckCase::MatMul,
        CheckCase::Transpose,
        CheckCase::Dense,
        CheckCase::Softmax,
        CheckCase::Sum,
        CheckCase::Bce,
        CheckCase::Conv3d,
        CheckCase::MaxPool3d,
        CheckCase::MeanPool3d,
        CheckCase::BatchNormTrain,
        CheckCase::BatchNormEval,
        CheckCase::Reshape,
        CheckCase::Concat,
        CheckCase::Stack,
        CheckCase::ConvBlock,
        CheckCase::MultiHeadAttention,
        CheckCase::Backbone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckCase::Add => "add",
            CheckCase::Sub => "sub",
            CheckCase::Mul => "mul",
            CheckCase::Scale => "scale",
            CheckCase::Relu => "relu",
            CheckCase::Sigmoid => "sigmoid",
            CheckCase::MatMul => "matmul",
            CheckCase::Transpose => "transpose",
            CheckCase::Dense => "dense",
            CheckCase::Softmax => "softmax",
            CheckCase::Sum => "sum",
            CheckCase::Bce => "bce",
            CheckCase::Conv3d => "conv3d",
            CheckCase::MaxPool3d => "max_pool3d",
            CheckCase::MeanPool3d => "mean_pool3d",
            CheckCase::BatchNormTrain => "batchnorm_train",
            CheckCase::BatchNormEval => "batchnorm_eval",
            CheckCase::Reshape => "reshape",
            CheckCase::Concat => "concat",
            CheckCase::Stack => "stack",
            CheckCase::ConvBlock => "conv_block",
            CheckCase::MultiHeadAttention => "mha",
            CheckCase::Backbone => "backbone",
        }
    }

    /// Whether the case is a composite layer rather than a single tape op.
    pub fn is_block(self) -> bool {
        matches!(
            self,
            CheckCase::ConvBlock | CheckCase::MultiHeadAttention | CheckCase::Backbone
        )
    }

    /// The tape op exercised most directly; used to aim fault injection.
    pub fn primary_op(self) -> OpKind {
        match self {
            CheckCase::Add => OpKind::Add,
            CheckCase::Sub => OpKind::Sub,
            CheckCase::Mul => OpKind::Mul,
            CheckCase::Scale => OpKind::Scale,
            CheckCase::Relu => OpKind::Relu,
            CheckCase::Sigmoid => OpKind::Sigmoid,
            CheckCase::MatMul | CheckCase::Dense | CheckCase::MultiHeadAttention => OpKind::MatMul,
            CheckCase::Transpose => OpKind::Transpose,
            CheckCase::Softmax => OpKind::Softmax,
            CheckCase::Sum => OpKind::Sum,
            CheckCase::Bce => OpKind::Bce,
            CheckCase::Conv3d | CheckCase::ConvBlock | CheckCase::Backbone => OpKind::Conv3d,
            CheckCase::MaxPool3d => OpKind::MaxPool3d,
            CheckCase::MeanPool3d => OpKind::MeanPool3d,
            CheckCase::BatchNormTrain => OpKind::BatchNormTrain,
            CheckCase::BatchNormEval => OpKind::BatchNormEval,
            CheckCase::Reshape => OpKind::Reshape,
            CheckCase::Concat | CheckCase::Stack => OpKind::Concat,
        }
    }
}

impl fmt::Display for CheckCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckCase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CheckCase::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = CheckCase::ALL.iter().map(|c| c.name()).collect();
                Error::Config(format!("unknown op {s:?}; expected all or one of {}", names.join(", ")))
            })
    }
}

/// Parses `all` or a comma-separated list of case names.
pub fn parse_cases(spec: &str) -> Result<Vec<CheckCase>> {
    if spec == "all" {
        return Ok(CheckCase::ALL.to_vec());
    }
    spec.split(',').map(|s| s.trim().parse()).collect()
}

/// Outcome of one case at one precision.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub case: CheckCase,
    pub scalar: &'static str,
    pub trials: usize,
    /// Coordinates compared across all trials.
    pub checked: usize,
    /// Coordinates whose one-sided slopes disagreed (a kink inside the step), not compared.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

/// Relative error with small magnitudes floored, so near-zero gradients are compared absolutely.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// Gradients of a scalarised instance: loss value and one gradient per input.
type Eval<T> = Box<dyn Fn(&[Tensor<T>], bool, Option<OpKind>) -> Result<(f64, Vec<Tensor<T>>)>>;

struct Instance<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    eval: Eval<T>,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(lo..hi)))
}

/// Values bounded away from zero, so ReLU kinks stay outside the difference step.
fn away_from_zero<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        T::of(if rng.gen_bool(0.5) { m } else { -m })
    })
}

/// Distinct values spaced well beyond the difference step, so max-pool winners are stable.
fn distinct<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let order = sample(rng, n, n);
    let data = order
        .iter()
        .map(|i| T::of((i as f64 - n as f64 / 2.0) * 0.05 + rng.gen_range(0.0..0.01)))
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// `sum_i <out_i, w_i>` on the tape, backward, then gradients of every input.
fn scalarise<T: Scalar>(tape: &mut Tape<T>, outputs: &[Var], weights: &[Tensor<T>]) -> Result<f64> {
    let mut total = 0.0;
    let mut loss = None;
    for (&out, w) in outputs.iter().zip(weights) {
        total += tape
            .value(out)
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum::<f64>();
        let wv = tape.constant(w.clone())?;
        let prod = tape.mul(out, wv)?;
        let s = tape.sum(prod)?;
        loss = Some(match loss {
            None => s,
            Some(l) => tape.add(l, s)?,
        });
    }
    let loss = loss.ok_or_else(|| Error::Contract("gradcheck case has no outputs".into()))?;
    tape.backward(loss)?;
    Ok(total)
}

/// Wraps a pure tape function of its inputs; output weights are drawn on first use.
fn op_instance<T: Scalar>(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor<T>>,
    f: impl Fn(&mut Tape<T>, &[Var]) -> Result<Vec<Var>> + 'static,
) -> Result<Instance<T>> {
    let mut probe = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| probe.leaf(t.clone(), false))
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<Tensor<T>> = f(&mut probe, &vars)?
        .iter()
        .map(|&o| uniform(rng, probe.shape(o).to_vec(), -1.0, 1.0))
        .collect();
    let eval: Eval<T> = Box::new(move |xs, grads, fault| {
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_backward_fault(k);
        }
        let vars = xs
            .iter()
            .map(|t| tape.leaf(t.clone(), grads))
            .collect::<Result<Vec<_>>>()?;
        let outs = f(&mut tape, &vars)?;
        let loss = if grads {
            scalarise(&mut tape, &outs, &weights)?
        } else {
            outs.iter()
                .zip(&weights)
                .map(|(&o, w)| {
                    tape.value(o)
                        .data()
                        .iter()
                        .zip(w.data())
                        .map(|(a, b)| a.as_f64() * b.as_f64())
                        .sum::<f64>()
                })
                .sum()
        };
        let g = if grads {
            vars.iter()
                .zip(xs)
                .map(|(&v, x)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
                .collect()
        } else {
            Vec::new()
        };
        Ok((loss, g))
    });
    Ok(Instance { inputs, eval })
}

/// Wraps a parameterised block: inputs are the block input followed by every trainable parameter.
fn block_instance<T: Scalar>(
    rng: &mut ChaCha8Rng,
    x: Tensor<T>,
    store: ParamStore<T>,
    f: impl Fn(&mut Forward<'_, T>, Var) -> Result<Vec<Var>> + 'static,
) -> Result<Instance<T>> {
    let ids = store.trainable_ids();
    let mut inputs = vec![x];
    // Jitter the deterministic initial values (unit gammas, zero betas). Positive
    // shifts keep ReLU channels alive: a dead channel has zero batch variance, where
    // batch norm curves on the scale of sqrt(eps) and no finite step is accurate.
    for &id in &ids {
        let p = store.get(id);
        let offset = if p.kind == ParamKind::Shift { 0.5 } else { 0.0 };
        let v = &p.value;
        let data = v
            .data()
            .iter()
            .map(|&a| a + T::of(offset + rng.gen_range(-0.2..0.2)))
            .collect();
        inputs.push(Tensor::new(v.shape().to_vec(), data)?);
    }
    let weights = {
        let mut fw = Forward::new(&store, Mode::Train, false);
        let xv = fw.tape.constant(inputs[0].clone())?;
        f(&mut fw, xv)?
            .iter()
            .map(|&o| uniform(rng, fw.tape.shape(o).to_vec(), -1.0, 1.0))
            .collect::<Vec<Tensor<T>>>()
    };
    let eval: Eval<T> = Box::new(move |xs, grads, fault| {
        let mut local = store.clone();
        for (&id, v) in ids.iter().zip(&xs[1..]) {
            *local.value_mut(id) = v.clone();
        }
        let mut fw = Forward::new(&local, Mode::Train, grads);
        if let Some(k) = fault {
            fw.tape.inject_backward_fault(k);
        }
        let xv = fw.tape.leaf(xs[0].clone(), grads)?;
        let outs = f(&mut fw, xv)?;
        if !grads {
            let mut total = 0.0;
            for (&o, w) in outs.iter().zip(&weights) {
                total += fw
                    .tape
                    .value(o)
                    .data()
                    .iter()
                    .zip(w.data())
                    .map(|(a, b)| a.as_f64() * b.as_f64())
                    .sum::<f64>();
            }
            return Ok((total, Vec::new()));
        }
        let loss = scalarise(&mut fw.tape, &outs, &weights)?;
        let mut g = vec![fw
            .tape
            .grad(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(xs[0].shape().to_vec()))];
        let by_id: Vec<_> = fw.param_grads();
        for &id in &ids {
            let t = by_id
                .iter()
                .find(|(i, _)| *i == id)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Contract("missing parameter gradient".into()))?;
            g.push(t);
        }
        Ok((loss, g))
    });
    Ok(Instance { inputs, eval })
}

fn instance<T: Scalar>(case: CheckCase, rng: &mut ChaCha8Rng) -> Result<Instance<T>> {
    let u = |rng: &mut ChaCha8Rng, shape: Vec<usize>| uniform::<T>(rng, shape, -1.0, 1.0);
    match case {
        CheckCase::Add | CheckCase::Sub | CheckCase::Mul => {
            let a = u(rng, vec![2, 3, 4]);
            // half the trials broadcast a trailing-suffix operand
            let b = if rng.gen_bool(0.5) { u(rng, vec![3, 4]) } else { u(rng, vec![2, 3, 4]) };
            op_instance(rng, vec![a, b], move |t, v| {
                Ok(vec![match case {
                    CheckCase::Add => t.add(v[0], v[1])?,
                    CheckCase::Sub => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                }])
            })
        }
        CheckCase::Scale => {
            let k = T::of(rng.gen_range(-2.0..2.0));
            let a = u(rng, vec![3, 5]);
            op_instance(rng, vec![a], move |t, v| Ok(vec![t.scale(v[0], k)?]))
        }
        CheckCase::Relu => {
            let a = away_from_zero(rng, vec![4, 5]);
            op_instance(rng, vec![a], |t, v| Ok(vec![t.relu(v[0])?]))
        }
        CheckCase::Sigmoid => {
            let a = uniform(rng, vec![4, 5], -3.0, 3.0);
            op_instance(rng, vec![a], |t, v| Ok(vec![t.sigmoid(v[0])?]))
        }
        CheckCase::MatMul => {
            let (m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4));
            let (a, b) = match rng.gen_range(0..3) {
                0 => (u(rng, vec![m, k]), u(rng, vec![k, n])),
                1 => (u(rng, vec![2, m, k]), u(rng, vec![k, n])),
                _ => (u(rng, vec![2, m, k]), u(rng, vec![2, k, n])),
            };
            op_instance(rng, vec![a, b], |t, v| Ok(vec![t.matmul(v[0], v[1])?]))
        }
        CheckCase::Transpose => {
            let a = u(rng, vec![2, 3, 4]);
            op_instance(rng, vec![a], |t, v| Ok(vec![t.transpose(v[0])?]))
        }
        CheckCase::Dense => {
            let (x, w, b) = (u(rng, vec![3, 4]), u(rng, vec![4, 2]), u(rng, vec![2]));
            op_instance(rng, vec![x, w, b], |t, v| Ok(vec![t.dense(v[0], v[1], Some(v[2]))?]))
        }
        CheckCase::Softmax => {
            let axis = rng.gen_range(0..3);
            let a = uniform(rng, vec![2, 3, 4], -2.0, 2.0);
            op_instance(rng, vec![a], move |t, v| Ok(vec![t.softmax(v[0], axis)?]))
        }
        CheckCase::Sum => {
            let a = u(rng, vec![3, 4]);
            op_instance(rng, vec![a], |t, v| Ok(vec![t.sum(v[0])?]))
        }
        CheckCase::Bce => {
            let n = rng.gen_range(1..8);
            let p = uniform(rng, vec![n], 0.05, 0.95);
            let y: Vec<T> = (0..n).map(|_| T::of(f64::from(u8::from(rng.gen_bool(0.5))))).collect();
            op_instance(rng, vec![p], move |t, v| Ok(vec![t.bce(v[0], &y)?]))
        }
        CheckCase::Conv3d => {
            let win = Window3 {
                kernel: [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)],
                stride: [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3)],
                padding: [rng.gen_range(0..2), rng.gen_range(0..2), rng.gen_range(0..2)],
            };
            let (c_in, c_out) = (rng.gen_range(1..3), rng.gen_range(1..4));
            let batched = rng.gen_bool(0.5);
            let mut xs = vec![c_in, 4, 5, 4];
            if batched {
                xs.insert(0, 2);
            }
            let [kd, kh, kw] = win.kernel;
            let (x, k) = (u(rng, xs), u(rng, vec![c_out, c_in, kd, kh, kw]));
            op_instance(rng, vec![x, k], move |t, v| Ok(vec![t.conv3d(v[0], v[1], win)?]))
        }
        CheckCase::MaxPool3d | CheckCase::MeanPool3d => {
            let kind = if case == CheckCase::MaxPool3d { PoolKind::Max } else { PoolKind::Mean };
            let k = rng.gen_range(2..4);
            let win = Window3::cube(k, rng.gen_range(1..3), rng.gen_range(0..k.min(2)));
            let x = distinct(rng, vec![2, 5, 4, 5]);
            op_instance(rng, vec![x], move |t, v| Ok(vec![t.pool3d(v[0], kind, win)?]))
        }
        CheckCase::BatchNormTrain | CheckCase::BatchNormEval => {
            let c = rng.gen_range(1..4);
            let x = uniform(rng, vec![3, c, 2, 3, 2], -2.0, 2.0);
            let gamma = uniform(rng, vec![c], 0.5, 1.5);
            let beta = u(rng, vec![c]);
            let mean: Vec<T> = (0..c).map(|_| T::of(rng.gen_range(-0.5..0.5))).collect();
            let var: Vec<T> = (0..c).map(|_| T::of(rng.gen_range(0.5..2.0))).collect();
            let eps = T::of(crate::layers::BN_EPS);
            let train = case == CheckCase::BatchNormTrain;
            op_instance(rng, vec![x, gamma, beta], move |t, v| {
                Ok(vec![if train {
                    t.batchnorm_train(v[0], v[1], v[2], eps)?.0
                } else {
                    t.batchnorm_eval(v[0], v[1], v[2], &mean, &var, eps)?
                }])
            })
        }
        CheckCase::Reshape => {
            let a = u(rng, vec![2, 3, 4]);
            op_instance(rng, vec![a], |t, v| {
                let r = t.reshape(v[0], vec![4, 6])?;
                Ok(vec![t.flatten(r)?])
            })
        }
        CheckCase::Concat | CheckCase::Stack => {
            let axis = rng.gen_range(0..3);
            let parts: Vec<Tensor<T>> = (0..3)
                .map(|_| {
                    let mut shape = vec![2, 3, 2];
                    if case == CheckCase::Concat {
                        shape[axis] = rng.gen_range(1..4);
                    }
                    u(rng, shape)
                })
                .collect();
            op_instance(rng, parts, move |t, v| {
                Ok(vec![if case == CheckCase::Concat {
                    t.concat(v, axis)?
                } else {
                    t.stack(v, axis)?
                }])
            })
        }
        CheckCase::ConvBlock => {
            let mut b = ParamBuilder::<T>::new(rng.gen());
            let (c_in, c_out, stride) = if rng.gen_bool(0.5) { (2, 2, 1) } else { (2, 3, 2) };
            let block = ResidualBlock::new(&mut b, "block", c_in, c_out, stride)?;
            let x = u(rng, vec![2, c_in, 3, 4, 3]);
            block_instance(rng, x, b.finish(), move |f, x| Ok(vec![block.forward(f, x)?]))
        }
        CheckCase::MultiHeadAttention => {
            let mut b = ParamBuilder::<T>::new(rng.gen());
            let heads = if rng.gen_bool(0.5) { 1 } else { 2 };
            let mha = MultiHeadAttention::new(&mut b, "mha", MultiHeadAttentionConfig::new(4, heads)?)?;
            let x = u(rng, vec![2, 3, 4]);
            block_instance(rng, x, b.finish(), move |f, x| Ok(vec![mha.forward(f, x)?.0]))
        }
        CheckCase::Backbone => {
            let mut b = ParamBuilder::<T>::new(rng.gen());
            let net = Backbone::new(&mut b, 1, [2, 2, 2, 2])?;
            let x = u(rng, vec![4, 1, 8, 9, 8]);
            block_instance(rng, x, b.finish(), move |f, x| {
                let (p, feat) = net.forward(f, x)?;
                Ok(vec![p, feat])
            })
        }
    }
}

/// Runs `trials` seeded instances of `case` with the backward pass at precision `T`.
///
/// Central differences (step `T::FD_STEP`) are always taken on an `f64` twin of the
/// instance holding the same values: `f32` forward rounding divided by the step
/// would otherwise swamp the tolerance.
pub fn check_case<T: Scalar>(case: CheckCase, trials: usize, seed: u64, fault: Option<OpKind>) -> Result<CaseReport> {
    let h = T::FD_STEP;
    let mut report = CaseReport {
        case,
        scalar: T::NAME,
        trials,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        tolerance: T::FD_TOLERANCE,
    };
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(seed, case.name(), trial as u64));
        let inst = instance::<T>(case, &mut rng.clone())?;
        let twin = instance::<f64>(case, &mut rng)?;
        let inputs: Vec<Tensor<f64>> = inst.inputs.iter().map(Tensor::cast).collect();
        let (_, grads) = (inst.eval)(&inst.inputs, true, fault)?;
        let (base, _) = (twin.eval)(&inputs, false, None)?;
        for (slot, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let picks = sample(&mut rng, n, n.min(COORDS_PER_INPUT));
            for i in picks.iter() {
                let at = |delta: f64| -> Result<f64> {
                    let mut xs = inputs.clone();
                    xs[slot].data_mut()[i] += delta;
                    Ok((twin.eval)(&xs, false, None)?.0)
                };
                let (plus, minus) = (at(h)?, at(-h)?);
                let (right, left) = ((plus - base) / h, (base - minus) / h);
                if (right - left).abs() > KINK_RATIO * right.abs().max(left.abs()).max(ERROR_FLOOR) {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * h);
                let a = grads[slot].data()[i].as_f64();
                let err = rel_error(a, numeric);
                report.max_rel_error = report.max_rel_error.max(err);
                report.checked += 1;
            }
        }
    }
    Ok(report)
}

/// Every requested case at `f64` then `f32`.
pub fn run_checks(cases: &[CheckCase], trials: usize, seed: u64, fault: Option<OpKind>) -> Result<Vec<CaseReport>> {
    let mut out = Vec::with_capacity(cases.len() * 2);
    for &c in cases {
        out.push(check_case::<f64>(c, trials, seed, fault)?);
        out.push(check_case::<f32>(c, trials, seed, fault)?);
    }
    Ok(out)
}

pub fn format_table(reports: &[CaseReport]) -> String {
    let mut s = String::from("op\tscalar\ttrials\tchecked\tskipped\tmax_rel_error\ttolerance\tresult\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:.3e}\t{:.0e}\t{}",
            r.case,
            r.scalar,
            r.trials,
            r.checked,
            r.skipped,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for c in CheckCase::ALL {
            assert_eq!(c.name().parse::<CheckCase>().unwrap(), c);
        }
        assert_eq!(parse_cases("all").unwrap().len(), CheckCase::ALL.len());
        assert_eq!(parse_cases("relu,mha").unwrap(), vec![CheckCase::Relu, CheckCase::MultiHeadAttention]);
        assert!(matches!(parse_cases("tanh"), Err(Error::Config(_))));
    }

    #[test]
    fn relu_passes_and_injected_fault_fails() {
        let ok = check_case::<f64>(CheckCase::Relu, 5, 1, None).unwrap();
        assert!(ok.passed(), "{ok:?}");
        let bad = check_case::<f64>(CheckCase::Relu, 5, 1, Some(OpKind::Relu)).unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(2.0, 1.0), 0.5);
        assert!((rel_error(1e-6, 0.0) - 1e-4).abs() < 1e-12);
    }
}
