//! Central finite-difference checking of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Relative error used throughout: `|a - n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    grad_check_multi(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        None,
        eps,
    )
}

/// Multi-input variant. `coords` restricts the comparison to
/// `(input, flat index)` pairs; `None` checks every coordinate.
pub fn grad_check_multi<F>(
    f: F,
    inputs: &[Tensor<f64>],
    coords: Option<&[(usize, usize)]>,
    eps: f64,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(eps > 0.0) {
        return Err(invalid!("finite-difference step must be positive, got {eps}"));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let y = f(&tape, &vars)?.value();
        if y.len() != 1 {
            return Err(Error::Backward(format!(
                "gradient check needs a scalar function, got shape {:?}",
                y.shape()
            )));
        }
        Ok(y.item())
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let y = f(&tape, &vars)?;
    if y.value().len() != 1 {
        return Err(Error::Backward(format!(
            "gradient check needs a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    let grads = tape.backward(y)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(k, x)| (0..x.len()).map(move |i| (k, i)))
                .collect();
            &all
        }
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for &(k, i) in coords {
        let orig = probe[k].data()[i];
        probe[k].data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe[k].data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe[k].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[k].data()[i], numeric));
    }
    Ok(worst)
}
