//! Layers with forward and backward rules: convolutions (grouped, dilated,
//! depthwise separable), batch normalization, pooling, the linear head and
//! the cross-entropy criterion.

pub mod conv;
pub mod loss;
pub mod norm;
pub mod params;
pub mod pool;

use rand::Rng;

pub use conv::{conv2d, conv2d_forward, Conv2dSpec};
pub use loss::cross_entropy;
pub use norm::{batchnorm2d_eval, batchnorm2d_train, BatchStats, BN_EPS, BN_MOMENTUM};
pub use params::{Ctx, ParamEntry, ParamId, ParamStore, StatUpdate};
pub use pool::{global_pool, maxpool2d, MaxPoolSpec, PoolKind};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{RandomInit, Scalar, Tensor, Var};

/// Fan-in scaled normal: `std = sqrt(2 / fan_in)`.
pub fn kaiming_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::random_with(shape, RandomInit::Normal { std }, rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: Conv2dSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let shape = spec.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let weight = store.add(format!("{name}.weight"), kaiming_normal(&shape, fan_in, rng)?, true);
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]), true));
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        conv2d(x, w, b, &self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        if cx.train {
            let (y, stats) = batchnorm2d_train(x, gamma, beta, self.eps)?;
            cx.push_update(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
                momentum: self.momentum,
            });
            Ok(y)
        } else {
            batchnorm2d_eval(
                x,
                gamma,
                beta,
                cx.store.value(self.running_mean),
                cx.store.value(self.running_var),
                self.eps,
            )
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// `x W + b` for `x: [N, D]`, `W: [D, K]`, `b: [K]`.
pub fn linear<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(shape_err!("linear: input {xs:?} with weight {ws:?}"));
    }
    let y = x.matmul(w)?;
    match b {
        Some(b) => {
            if b.shape() != [ws[1]] {
                return Err(shape_err!("linear bias {:?} for {} outputs", b.shape(), ws[1]));
            }
            y.add(b)
        }
        None => Ok(y),
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let w = kaiming_normal(&[in_features, out_features], in_features, rng)?;
        Ok(Linear {
            in_features,
            out_features,
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), true),
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        linear(x, cx.param(self.weight), Some(cx.param(self.bias)))
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }
}

/// Checks the depthwise / pointwise pairing contract.
pub fn check_separable(dw: &Conv2dSpec, pw: &Conv2dSpec) -> Result<()> {
    dw.validate()?;
    pw.validate()?;
    if dw.groups != dw.in_channels || dw.in_channels != dw.out_channels {
        return Err(invalid!("depthwise stage must have groups == in == out channels: {dw:?}"));
    }
    if pw.kernel != (1, 1) || pw.groups != 1 || pw.stride != (1, 1) || pw.padding != (0, 0) {
        return Err(invalid!("pointwise stage must be an ungrouped 1x1 conv: {pw:?}"));
    }
    if pw.in_channels != dw.out_channels {
        return Err(invalid!(
            "pointwise expects {} channels, depthwise yields {}",
            pw.in_channels,
            dw.out_channels
        ));
    }
    Ok(())
}

/// Depthwise conv followed by a pointwise conv.
pub fn depthwise_separable_conv<'t, T: Scalar>(
    x: Var<'t, T>,
    dw_weight: Var<'t, T>,
    pw_weight: Var<'t, T>,
    dw: &Conv2dSpec,
    pw: &Conv2dSpec,
) -> Result<Var<'t, T>> {
    check_separable(dw, pw)?;
    if dw.bias || pw.bias {
        return Err(invalid!("use DepthwiseSeparable for biased separable convolutions"));
    }
    let h = conv2d(x, dw_weight, None, dw)?;
    conv2d(h, pw_weight, None, pw)
}

#[derive(Clone, Debug)]
pub struct DepthwiseSeparable {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

impl DepthwiseSeparable {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dw: Conv2dSpec,
        pw: Conv2dSpec,
    ) -> Result<Self> {
        check_separable(&dw, &pw)?;
        Ok(DepthwiseSeparable {
            depthwise: Conv2d::new(store, rng, &format!("{name}.dw"), dw)?,
            pointwise: Conv2d::new(store, rng, &format!("{name}.pw"), pw)?,
        })
    }

    /// `k x k` depthwise over `channels` then a 1x1 to `out_channels`.
    pub fn specs(
        channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> (Conv2dSpec, Conv2dSpec) {
        let dw = Conv2dSpec::new(channels, channels, kernel)
            .groups(channels)
            .dilation(dilation)
            .same_padding()
            .stride(stride);
        let pw = Conv2dSpec::new(channels, out_channels, 1);
        (dw, pw)
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.depthwise.forward(cx, x)?;
        self.pointwise.forward(cx, h)
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_param_count() {
        let (dw, pw) = DepthwiseSeparable::specs(64, 64, 3, 1, 1);
        assert_eq!(dw.param_count() + pw.param_count(), 576 + 4096);
        assert!(dw.param_count() + pw.param_count() < Conv2dSpec::new(64, 64, 3).param_count());
    }

    #[test]
    fn separable_spec_violations() {
        let (dw, pw) = DepthwiseSeparable::specs(8, 4, 3, 1, 1);
        assert!(check_separable(&dw, &pw).is_ok());
        assert!(check_separable(&Conv2dSpec::new(8, 8, 3), &pw).is_err());
        assert!(check_separable(&dw, &Conv2dSpec::new(8, 4, 3)).is_err());
        assert!(check_separable(&dw, &Conv2dSpec::new(4, 4, 1)).is_err());
    }

    #[test]
    fn separable_delta_identity() {
        let c = 3;
        let (dw, pw) = DepthwiseSeparable::specs(c, c, 3, 1, 1);
        let mut dwk = Tensor::<f64>::zeros(&dw.weight_shape());
        for ch in 0..c {
            dwk.data_mut()[ch * 9 + 4] = 1.0;
        }
        let mut pwk = Tensor::<f64>::zeros(&pw.weight_shape());
        for ch in 0..c {
            pwk.data_mut()[ch * c + ch] = 1.0;
        }
        let x = Tensor::random_with(
            &[2, c, 5, 4],
            RandomInit::Uniform { bound: 1.0 },
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let tape = Tape::new();
        let y = depthwise_separable_conv(
            tape.constant(x.clone()),
            tape.constant(dwk),
            tape.constant(pwk),
            &dw,
            &pw,
        )
        .unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn linear_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
        let w = tape.constant(Tensor::from_f64(&[2, 1], &[1., 1.]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[1], &[1.]).unwrap());
        assert_eq!(linear(x, w, Some(b)).unwrap().value().data(), &[4.]);
        let eye = tape.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
        assert_eq!(linear(x, eye, None).unwrap().value().data(), &[1., 2.]);
        assert!(linear(x, b, None).is_err());
    }

    #[test]
    fn eval_batchnorm_is_batch_independent() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        store
            .set_value(bn.running_mean, Tensor::from_f64(&[2], &[0.3, -0.1]).unwrap())
            .unwrap();
        store
            .set_value(bn.running_var, Tensor::from_f64(&[2], &[2.0, 0.5]).unwrap())
            .unwrap();
        let batch = Tensor::random_with(&[3, 2, 2, 2], RandomInit::Normal { std: 1.0 }, &mut rng).unwrap();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, false);
        let full = bn.forward(&cx, tape.constant(batch.clone())).unwrap().value();
        let single = Tensor::new(&[1, 2, 2, 2], batch.data()[8..16].to_vec()).unwrap();
        let one = bn.forward(&cx, tape.constant(single)).unwrap().value();
        assert_eq!(&full.data()[8..16], one.data());
    }
}
