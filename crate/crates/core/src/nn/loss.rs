use crate::error::{invalid, shape_err, Result};
use crate::tensor::{GradFn, Scalar, Tensor, Var};

struct CrossEntropyGrad<T> {
    softmax: Vec<T>,
    targets: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> GradFn<T> for CrossEntropyGrad<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let n = self.targets.len();
        let scale = grad.item() / T::from_f64(n as f64);
        let mut g: Vec<T> = self.softmax.iter().map(|&p| p * scale).collect();
        for (row, &t) in self.targets.iter().enumerate() {
            g[row * self.classes + t] -= scale;
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), g)?)])
    }
}

/// Row-wise log-softmax via the max-shifted log-sum-exp.
pub fn log_softmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for &v in row {
            s += (v - m).exp();
        }
        let lse = m + s.ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

/// Mean over the batch of `-log softmax(logits)[target]`.
pub fn cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, targets: &[usize]) -> Result<Var<'t, T>> {
    let lv = logits.value();
    let s = lv.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(shape_err!(
            "cross_entropy: logits {s:?} with {} targets",
            targets.len()
        ));
    }
    let (n, k) = (s[0], s[1]);
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(invalid!("target {bad} out of range for {k} classes"));
    }
    let logp = log_softmax_rows(lv.data(), k);
    let mut total = T::zero();
    for (row, &t) in targets.iter().enumerate() {
        total -= logp[row * k + t];
    }
    let loss = total / T::from_f64(n as f64);
    let softmax = logp.iter().map(|v| v.exp()).collect();
    logits.tape().record(
        "cross_entropy",
        &[logits],
        Tensor::scalar(loss),
        CrossEntropyGrad {
            softmax,
            targets: targets.to_vec(),
            classes: k,
        },
    )
}
