use crate::error::{invalid, shape_err, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) || !(self.eps > 0.0) {
            return Err(invalid!("Adam needs betas in [0, 1) and eps > 0: {self:?}"));
        }
        Ok(())
    }
}

/// Moments for every trainable parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub lr: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

/// One Adam update of `theta` in place; `t` is the 1-based step number.
pub fn adam_update<T: Scalar>(
    theta: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let c1 = T::from_f64(1.0 / (1.0 - cfg.beta1.powf(t as f64)));
    let c2 = T::from_f64(1.0 / (1.0 - cfg.beta2.powf(t as f64)));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(cfg.eps));
    for i in 0..theta.len() {
        let gi = g[i];
        m[i] = b1 * m[i] + one_b1 * gi;
        v[i] = b2 * v[i] + one_b2 * gi * gi;
        let mh = m[i] * c1;
        let vh = v[i] * c2;
        theta[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig, lr: f64) -> Result<Self> {
        config.validate()?;
        let shapes: Vec<Vec<usize>> = store
            .trainable_ids()
            .into_iter()
            .map(|id| store.value(id).shape().to_vec())
            .collect();
        Ok(AdamState {
            config,
            t: 0,
            lr,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        })
    }

    /// Applies the accumulated store gradients; a parameter without a
    /// gradient slot is treated as having gradient zero.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(invalid!("learning rate must be non-negative, got {}", self.lr));
        }
        let ids: Vec<ParamId> = store.trainable_ids();
        if ids.len() != self.m.len() {
            return Err(shape_err!(
                "optimizer tracks {} tensors, model has {} trainable",
                self.m.len(),
                ids.len()
            ));
        }
        self.t += 1;
        for (k, id) in ids.into_iter().enumerate() {
            let grad = store.grad(id).cloned();
            let shape = store.value(id).shape().to_vec();
            if self.m[k].shape() != shape.as_slice() {
                return Err(shape_err!(
                    "{}: moment {:?} vs parameter {shape:?}",
                    store.name(id),
                    self.m[k].shape()
                ));
            }
            let g = match grad {
                Some(g) if g.shape() == shape.as_slice() => g,
                Some(g) => {
                    return Err(shape_err!("{}: gradient {:?} vs parameter {shape:?}", store.name(id), g.shape()))
                }
                None => Tensor::zeros(&shape),
            };
            let theta = store.value_mut(id);
            adam_update(
                theta.data_mut(),
                g.data(),
                self.m[k].data_mut(),
                self.v[k].data_mut(),
                self.t,
                self.lr,
                &self.config,
            );
        }
        Ok(())
    }
}

/// `base * factor^floor(epoch / every)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub factor: f64,
    pub every: usize,
}

impl Default for StepDecay {
    fn default() -> Self {
        StepDecay {
            base: 1e-4,
            factor: 0.1,
            every: 10,
        }
    }
}

impl StepDecay {
    pub fn lr(&self, epoch: usize) -> f64 {
        self.base * self.factor.powi((epoch / self.every.max(1)) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_noop() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap(), true);
        let before = store.value(a).clone();
        let mut opt = AdamState::new(&store, AdamConfig::default(), 1e-3).unwrap();
        for _ in 0..5 {
            opt.step(&mut store).unwrap();
        }
        assert_eq!(*store.value(a), before);
        assert_eq!(opt.t, 5);
    }

    #[test]
    fn first_step_scalar() {
        let cfg = AdamConfig::default();
        let (mut th, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        adam_update(&mut th, &[0.5], &mut m, &mut v, 1, 1e-4, &cfg);
        // m_hat = 0.5, v_hat = 0.25: step = lr * 0.5 / (0.5 + 1e-8)
        let expect = -1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((th[0] - expect).abs() < 1e-18);
        assert!((th[0] + 1e-4).abs() < 1e-11);
        assert!(v[0] >= 0.0);
    }

    #[test]
    fn equal_grads_equal_updates() {
        let cfg = AdamConfig::default();
        let mut th = [1.0f32, 1.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for t in 1..=4 {
            adam_update(&mut th, &[0.3, 0.3], &mut m, &mut v, t, 1e-2, &cfg);
        }
        assert_eq!(th[0], th[1]);
    }

    #[test]
    fn schedule_breakpoints() {
        let s = StepDecay::default();
        assert_eq!(s.lr(0), 1e-4);
        assert!((s.lr(9) - 1e-4).abs() < 1e-20);
        assert!((s.lr(10) - 1e-5).abs() < 1e-18);
        assert!((s.lr(29) - 1e-6).abs() < 1e-18);
        for e in 0..40 {
            assert!(s.lr(e + 1) <= s.lr(e));
        }
    }
}
