use crate::error::{invalid, shape_err, Result};
use crate::tensor::{GradFn, ReduceKind, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPoolSpec {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 || 2 * self.padding >= self.kernel + 1 {
            return Err(invalid!("invalid pool geometry {self:?}"));
        }
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return Err(shape_err!("pool output extent < 1 for {h}x{w} with {self:?}"));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }
}

struct MaxPoolGrad {
    argmax: Vec<usize>,
}

impl<T: Scalar> GradFn<T> for MaxPoolGrad {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut gx = Tensor::zeros(inputs[0].shape());
        let gd = gx.data_mut();
        for (&i, &g) in self.argmax.iter().zip(grad.data()) {
            gd[i] += g;
        }
        Ok(vec![Some(gx)])
    }
}

/// Window max with `-inf` padding; ties resolve to the first element of
/// the window in row-major order.
pub fn maxpool2d<'t, T: Scalar>(x: Var<'t, T>, spec: MaxPoolSpec) -> Result<Var<'t, T>> {
    let xv = x.value();
    let s = xv.shape();
    if s.len() != 4 {
        return Err(shape_err!("maxpool2d expects [N,C,H,W], got {s:?}"));
    }
    let (h, w) = (s[2], s[3]);
    let (ho, wo) = spec.output_hw(h, w)?;
    let planes = s[0] * s[1];
    let xd = xv.data();
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..spec.kernel {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..spec.kernel {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
    }
    let value = Tensor::new(&[s[0], s[1], ho, wo], out)?;
    x.tape()
        .record("maxpool2d", &[x], value, MaxPoolGrad { argmax })
}

/// Per-channel spatial reduction to `[N, C, 1, 1]`.
pub fn global_pool<'t, T: Scalar>(x: Var<'t, T>, kind: PoolKind) -> Result<Var<'t, T>> {
    if x.shape().len() != 4 {
        return Err(shape_err!("global_pool expects [N,C,H,W], got {:?}", x.shape()));
    }
    let reduce = match kind {
        PoolKind::Avg => ReduceKind::Mean,
        PoolKind::Max => ReduceKind::Max,
    };
    x.reduce(&[2, 3], reduce, true)
}
