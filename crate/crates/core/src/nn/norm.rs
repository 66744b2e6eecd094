//! Per-channel batch normalization over (N, H, W).

use crate::error::{shape_err, Result};
use crate::tensor::{GradFn, Scalar, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch statistics produced by a train-mode pass, used to update the
/// running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (biased when the group has a single element).
    pub var: Vec<T>,
}

fn dims(shape: &[usize], channels: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 || shape[1] != channels {
        return Err(shape_err!(
            "batchnorm over {channels} channels got input {shape:?}"
        ));
    }
    Ok((shape[0], shape[1], shape[2] * shape[3]))
}

struct TrainGrad<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> GradFn<T> for TrainGrad<T> {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, p) = dims(x.shape(), gamma.len())?;
        let count = T::from_f64((n * p) as f64);
        let g = grad.data();
        let mut gx = Tensor::zeros(x.shape());
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * p;
                for i in base..base + p {
                    sum_g += g[i];
                    sum_gx += g[i] * self.xhat[i];
                }
            }
            ggamma[ch] = sum_gx;
            gbeta[ch] = sum_g;
            if needs[0] {
                let k = gamma.data()[ch] * self.inv_std[ch] / count;
                let gd = gx.data_mut();
                for b in 0..n {
                    let base = (b * c + ch) * p;
                    for i in base..base + p {
                        gd[i] = k * (count * g[i] - sum_g - self.xhat[i] * sum_gx);
                    }
                }
            }
        }
        Ok(vec![
            needs[0].then_some(gx),
            Some(Tensor::new(&[c], ggamma)?),
            Some(Tensor::new(&[c], gbeta)?),
        ])
    }
}

struct EvalGrad<T> {
    scale: Vec<T>,
    xhat: Vec<T>,
}

impl<T: Scalar> GradFn<T> for EvalGrad<T> {
    fn name(&self) -> &'static str {
        "batchnorm_eval"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, p) = dims(x.shape(), gamma.len())?;
        let g = grad.data();
        let mut gx = Tensor::zeros(x.shape());
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let k = gamma.data()[ch] * self.scale[ch];
                let base = (b * c + ch) * p;
                for i in base..base + p {
                    gbeta[ch] += g[i];
                    ggamma[ch] += g[i] * self.xhat[i];
                    if needs[0] {
                        gx.data_mut()[i] = g[i] * k;
                    }
                }
            }
        }
        Ok(vec![
            needs[0].then_some(gx),
            Some(Tensor::new(&[c], ggamma)?),
            Some(Tensor::new(&[c], gbeta)?),
        ])
    }
}

/// Train mode: normalizes with batch statistics and returns them.
pub fn batchnorm2d_train<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: f64,
) -> Result<(Var<'t, T>, BatchStats<T>)> {
    let xv = x.value();
    let (gv, bv) = (gamma.value(), beta.value());
    let (n, c, p) = dims(xv.shape(), gv.len())?;
    let count = n * p;
    let xd = xv.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    let cnt = T::from_f64(count as f64);
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            for &v in &xd[(b * c + ch) * p..][..p] {
                s += v;
            }
        }
        let m = s / cnt;
        let mut ss = T::zero();
        for b in 0..n {
            for &v in &xd[(b * c + ch) * p..][..p] {
                ss += (v - m) * (v - m);
            }
        }
        let biased = ss / cnt;
        let istd = T::one() / (biased + T::from_f64(eps)).sqrt();
        mean[ch] = m;
        var[ch] = if count > 1 {
            ss / T::from_f64((count - 1) as f64)
        } else {
            biased
        };
        inv_std[ch] = istd;
        let (ga, be) = (gv.data()[ch], bv.data()[ch]);
        for b in 0..n {
            let base = (b * c + ch) * p;
            for i in base..base + p {
                let h = (xd[i] - m) * istd;
                xhat[i] = h;
                out[i] = ga * h + be;
            }
        }
    }
    let value = Tensor::new(xv.shape(), out)?;
    let y = x
        .tape()
        .record("batchnorm", &[x, gamma, beta], value, TrainGrad { xhat, inv_std })?;
    Ok((y, BatchStats { mean, var }))
}

/// Eval mode: normalizes with fixed running statistics.
pub fn batchnorm2d_eval<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (gv, bv) = (gamma.value(), beta.value());
    let (n, c, p) = dims(xv.shape(), gv.len())?;
    let scale: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
        .collect();
    let xd = xv.data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let (m, s) = (running_mean.data()[ch], scale[ch]);
            let (ga, be) = (gv.data()[ch], bv.data()[ch]);
            let base = (b * c + ch) * p;
            for i in base..base + p {
                let h = (xd[i] - m) * s;
                xhat[i] = h;
                out[i] = ga * h + be;
            }
        }
    }
    let value = Tensor::new(xv.shape(), out)?;
    x.tape()
        .record("batchnorm_eval", &[x, gamma, beta], value, EvalGrad { scale, xhat })
}

/// Exponential moving average update of running statistics in place.
pub fn update_running<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    stats: &BatchStats<T>,
    momentum: f64,
) {
    let m = T::from_f64(momentum);
    let keep = T::one() - m;
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + m * b;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = keep * *r + m * b;
    }
}
