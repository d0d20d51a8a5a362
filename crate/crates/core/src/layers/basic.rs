use super::{Forward, Mode, ParamBuilder, ParamId, ParamKind};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor, Var, Window3};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Bias-free 3D convolution; always followed by batch norm in this model family.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub win: Window3,
}

impl Conv3d {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        win: Window3,
    ) -> Result<Self> {
        let [kd, kh, kw] = win.kernel;
        let weight = b.kaiming_uniform(
            format!("{name}.weight"),
            vec![c_out, c_in, kd, kh, kw],
            c_in * kd * kh * kw,
        )?;
        Ok(Conv3d { weight, win })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight)?;
        f.tape.conv3d(x, w, self.win)
    }
}

/// Per-channel batch norm over axis 1 with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: b.constant(format!("{name}.gamma"), vec![channels], 1.0, ParamKind::Scale)?,
            beta: b.constant(format!("{name}.beta"), vec![channels], 0.0, ParamKind::Shift)?,
            running_mean: b.constant(
                format!("{name}.running_mean"),
                vec![channels],
                0.0,
                ParamKind::RunningMean,
            )?,
            running_var: b.constant(
                format!("{name}.running_var"),
                vec![channels],
                1.0,
                ParamKind::RunningVar,
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma)?;
        let beta = f.param(self.beta)?;
        let eps = T::of(BN_EPS);
        let params = f.params();
        let rm = params.value(self.running_mean);
        let rv = params.value(self.running_var);
        match f.mode() {
            Mode::Train => {
                let (y, stats) = f.tape.batchnorm_train(x, gamma, beta, eps)?;
                let mom = T::of(BN_MOMENTUM);
                let blend = |run: &Tensor<T>, batch: &[T]| {
                    Tensor::new(
                        run.shape().to_vec(),
                        run.data()
                            .iter()
                            .zip(batch)
                            .map(|(&r, &b)| (T::one() - mom) * r + mom * b)
                            .collect(),
                    )
                };
                let new_mean = blend(rm, &stats.mean)?;
                let new_var = blend(rv, &stats.var)?;
                f.push_update(self.running_mean, new_mean);
                f.push_update(self.running_var, new_var);
                Ok(y)
            }
            Mode::Eval => f.tape.batchnorm_eval(x, gamma, beta, rm.data(), rv.data(), eps),
        }
    }
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = b.kaiming_uniform(
            format!("{name}.weight"),
            vec![in_features, out_features],
            in_features,
        )?;
        let bias = if bias {
            Some(b.constant(format!("{name}.bias"), vec![out_features], 0.0, ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Dense {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight)?;
        let b = self.bias.map(|id| f.param(id)).transpose()?;
        f.tape.dense(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + if self.bias.is_some() { self.out_features } else { 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamStore;

    #[test]
    fn bias_starts_at_zero_and_bn_at_identity() {
        let mut b = ParamBuilder::<f32>::new(1);
        let d = Dense::new(&mut b, "head", 4, 3, true).unwrap();
        let bn = BatchNorm::new(&mut b, "bn", 5).unwrap();
        let store: ParamStore<f32> = b.finish();
        assert!(store.value(d.bias.unwrap()).data().iter().all(|&x| x == 0.0));
        assert!(store.value(bn.gamma).data().iter().all(|&x| x == 1.0));
        assert!(store.value(bn.beta).data().iter().all(|&x| x == 0.0));
        assert!(store.value(bn.running_var).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn train_mode_records_running_update() {
        let mut b = ParamBuilder::<f64>::new(1);
        let bn = BatchNorm::new(&mut b, "bn", 1).unwrap();
        let store = b.finish();
        let mut f = Forward::new(&store, Mode::Train, true);
        let x = f
            .tape
            .leaf(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false)
            .unwrap();
        let y = bn.forward(&mut f, x).unwrap();
        let out = f.tape.value(y).data().to_vec();
        assert!(out.iter().sum::<f64>().abs() < 1e-12);
        let updates = f.into_updates();
        assert_eq!(updates.len(), 2);
        // mean 2.5 -> 0.9*0 + 0.1*2.5; unbiased var 5/3 -> 0.9 + 0.1*5/3
        assert!((updates[0].1.data()[0] - 0.25).abs() < 1e-12);
        assert!((updates[1].1.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
