//! Generic differentiable operations: broadcasting arithmetic, matmul,
//! reductions, activations and data movement.

use super::tape::{GradFn, Var};
use super::{broadcast_shape, for_each_broadcast, gemm, numel, Scalar, Tensor};
use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct BinaryGrad {
    kind: BinaryKind,
}

impl<T: Scalar> GradFn<T> for BinaryGrad {
    fn name(&self) -> &'static str {
        "binary"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let mut ga = needs[0].then(|| Tensor::zeros(a.shape()));
        let mut gb = needs[1].then(|| Tensor::zeros(b.shape()));
        let (ad, bd, g) = (a.data(), b.data(), grad.data());
        for_each_broadcast(grad.shape(), a.shape(), b.shape(), |o, ia, ib| {
            let go = g[o];
            let (da, db) = match self.kind {
                BinaryKind::Add => (go, go),
                BinaryKind::Sub => (go, -go),
                BinaryKind::Mul => (go * bd[ib], go * ad[ia]),
                BinaryKind::Div => {
                    let q = go / bd[ib];
                    (q, -q * ad[ia] / bd[ib])
                }
            };
            if let Some(ga) = ga.as_mut() {
                ga.data_mut()[ia] += da;
            }
            if let Some(gb) = gb.as_mut() {
                gb.data_mut()[ib] += db;
            }
        });
        Ok(vec![ga, gb])
    }
}

struct MatMulGrad;

impl<T: Scalar> GradFn<T> for MatMulGrad {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let ga = needs[0].then(|| {
            let mut out = Tensor::zeros(&[m, k]);
            gemm(m, n, k, grad.data(), false, b.data(), true, out.data_mut(), false);
            out
        });
        let gb = needs[1].then(|| {
            let mut out = Tensor::zeros(&[k, n]);
            gemm(k, m, n, a.data(), true, grad.data(), false, out.data_mut(), false);
            out
        });
        Ok(vec![ga, gb])
    }
}

struct ReduceGrad {
    kind: ReduceKind,
    keep_shape: Vec<usize>,
    count: usize,
    argmax: Vec<usize>,
}

impl<T: Scalar> GradFn<T> for ReduceGrad {
    fn name(&self) -> &'static str {
        "reduce"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let mut gx = Tensor::zeros(x.shape());
        let g = grad.data();
        match self.kind {
            ReduceKind::Max => {
                for (o, &i) in self.argmax.iter().enumerate() {
                    gx.data_mut()[i] += g[o];
                }
            }
            ReduceKind::Sum | ReduceKind::Mean => {
                let scale = if self.kind == ReduceKind::Mean {
                    T::one() / T::from_f64(self.count as f64)
                } else {
                    T::one()
                };
                let gd = gx.data_mut();
                for_each_broadcast(x.shape(), x.shape(), &self.keep_shape, |i, _, o| {
                    gd[i] = g[o] * scale;
                });
            }
        }
        Ok(vec![Some(gx)])
    }
}

struct UnaryGrad {
    kind: UnaryKind,
}

impl<T: Scalar> GradFn<T> for UnaryGrad {
    fn name(&self) -> &'static str {
        "unary"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.data();
        let data: Vec<T> = match self.kind {
            UnaryKind::Relu => inputs[0]
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect(),
            UnaryKind::Sigmoid => output
                .data()
                .iter()
                .zip(g)
                .map(|(&y, &g)| g * y * (T::one() - y))
                .collect(),
        };
        Ok(vec![Some(Tensor::new(inputs[0].shape(), data)?)])
    }
}

struct ReshapeGrad;

impl<T: Scalar> GradFn<T> for ReshapeGrad {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.reshaped(inputs[0].shape())?)])
    }
}

/// Copies the box `ranges` of `src` into `dst` at `offset`, or the reverse
/// when `gather` is set. Shared by pad, slice and concat.
fn copy_box<T: Scalar>(
    big: &mut [T],
    big_shape: &[usize],
    small: &mut [T],
    small_shape: &[usize],
    offset: &[usize],
    into_big: bool,
) {
    let bs = strides(big_shape);
    let rank = small_shape.len();
    let n = numel(small_shape);
    if rank == 0 {
        return;
    }
    let inner = small_shape[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut s = 0;
    while s < n {
        let mut b = 0;
        for d in 0..rank {
            b += (idx[d] + offset[d]) * bs[d];
        }
        if into_big {
            big[b..b + inner].copy_from_slice(&small[s..s + inner]);
        } else {
            small[s..s + inner].copy_from_slice(&big[b..b + inner]);
        }
        s += inner;
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < small_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

struct PadGrad {
    before: Vec<usize>,
}

impl<T: Scalar> GradFn<T> for PadGrad {
    fn name(&self) -> &'static str {
        "pad"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut gx = Tensor::zeros(inputs[0].shape());
        let mut g = grad.data().to_vec();
        let shape = gx.shape().to_vec();
        copy_box(&mut g, grad.shape(), gx.data_mut(), &shape, &self.before, false);
        Ok(vec![Some(gx)])
    }
}

struct SliceGrad {
    start: Vec<usize>,
}

impl<T: Scalar> GradFn<T> for SliceGrad {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut gx = Tensor::zeros(inputs[0].shape());
        let mut g = grad.data().to_vec();
        let shape = gx.shape().to_vec();
        copy_box(gx.data_mut(), &shape, &mut g, grad.shape(), &self.start, true);
        Ok(vec![Some(gx)])
    }
}

struct ConcatGrad {
    axis: usize,
}

impl<T: Scalar> GradFn<T> for ConcatGrad {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut g = grad.data().to_vec();
        let mut offset = vec![0; grad.rank()];
        let mut out = Vec::with_capacity(inputs.len());
        for (x, &need) in inputs.iter().zip(needs) {
            if need {
                let mut gx = Tensor::zeros(x.shape());
                let shape = gx.shape().to_vec();
                copy_box(&mut g, grad.shape(), gx.data_mut(), &shape, &offset, false);
                out.push(Some(gx));
            } else {
                out.push(None);
            }
            offset[self.axis] += x.shape()[self.axis];
        }
        Ok(out)
    }
}

struct UpsampleGrad {
    factor: usize,
}

impl<T: Scalar> GradFn<T> for UpsampleGrad {
    fn name(&self) -> &'static str {
        "upsample"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let s = x.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let f = self.factor;
        let (oh, ow) = (h * f, w * f);
        let mut gx = Tensor::zeros(s);
        let g = grad.data();
        let gd = gx.data_mut();
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    gd[p * h * w + (y / f) * w + xx / f] += g[p * oh * ow + y * ow + xx];
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn binary(self, other: Var<'t, T>, kind: BinaryKind) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(a.shape(), b.shape())?;
        if kind == BinaryKind::Div && cfg!(debug_assertions) && b.data().contains(&T::zero()) {
            return Err(invalid!("division by exact zero"));
        }
        let mut out = vec![T::zero(); numel(&out_shape)];
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&out_shape, a.shape(), b.shape(), |o, ia, ib| {
            let (x, y) = (ad[ia], bd[ib]);
            out[o] = match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
        });
        let value = Tensor::new(&out_shape, out)?;
        self.tape()
            .record("binary", &[self, other], value, BinaryGrad { kind })
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        let k = self.tape().constant(Tensor::scalar(c));
        self.mul(k)
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err!(
                "matmul of {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), false);
        self.tape().record("matmul", &[self, other], out, MatMulGrad)
    }

    /// Reduces over `axes`; `keepdim` retains them with extent 1.
    pub fn reduce(self, axes: &[usize], kind: ReduceKind, keepdim: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= rank) {
            return Err(invalid!("reduce axes {axes:?} invalid for rank {rank}"));
        }
        let keep_shape: Vec<usize> = x
            .shape()
            .iter()
            .enumerate()
            .map(|(i, &e)| if axes.contains(&i) { 1 } else { e })
            .collect();
        let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
        let n_out = numel(&keep_shape);
        let xd = x.data();
        let mut out = vec![T::zero(); n_out];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for_each_broadcast(x.shape(), x.shape(), &keep_shape, |i, _, o| {
                    out[o] += xd[i];
                });
                if kind == ReduceKind::Mean {
                    let c = T::from_f64(count as f64);
                    for v in &mut out {
                        *v /= c;
                    }
                }
            }
            ReduceKind::Max => {
                argmax = vec![usize::MAX; n_out];
                for_each_broadcast(x.shape(), x.shape(), &keep_shape, |i, _, o| {
                    if argmax[o] == usize::MAX || xd[i] > out[o] {
                        out[o] = xd[i];
                        argmax[o] = i;
                    }
                });
            }
        }
        let out_shape: Vec<usize> = if keepdim {
            keep_shape.clone()
        } else {
            x.shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &e)| e)
                .collect()
        };
        let value = Tensor::new(&out_shape, out)?;
        self.tape().record(
            "reduce",
            &[self],
            value,
            ReduceGrad {
                kind,
                keep_shape,
                count,
                argmax,
            },
        )
    }

    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(&axes, ReduceKind::Sum, false)
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(&axes, ReduceKind::Mean, false)
    }

    pub fn unary(self, kind: UnaryKind) -> Result<Var<'t, T>> {
        let x = self.value();
        let value = match kind {
            UnaryKind::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            UnaryKind::Sigmoid => x.map(sigmoid),
        };
        self.tape()
            .record("activation", &[self], value, UnaryGrad { kind })
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().reshaped(shape)?;
        self.tape().record("reshape", &[self], value, ReshapeGrad)
    }

    /// Zero padding with `(before, after)` counts per axis.
    pub fn pad(self, pads: &[(usize, usize)]) -> Result<Var<'t, T>> {
        let x = self.value();
        if pads.len() != x.rank() {
            return Err(invalid!(
                "pad spec has {} axes, tensor has {}",
                pads.len(),
                x.rank()
            ));
        }
        let out_shape: Vec<usize> = x
            .shape()
            .iter()
            .zip(pads)
            .map(|(&e, &(b, a))| e + b + a)
            .collect();
        let before: Vec<usize> = pads.iter().map(|p| p.0).collect();
        let mut out = Tensor::zeros(&out_shape);
        let mut src = x.data().to_vec();
        copy_box(out.data_mut(), &out_shape, &mut src, x.shape(), &before, true);
        self.tape().record("pad", &[self], out, PadGrad { before })
    }

    /// Sub-box `[start, end)` per axis.
    pub fn slice(self, ranges: &[(usize, usize)]) -> Result<Var<'t, T>> {
        let x = self.value();
        if ranges.len() != x.rank()
            || ranges
                .iter()
                .zip(x.shape())
                .any(|(&(s, e), &n)| s >= e || e > n)
        {
            return Err(invalid!(
                "slice {ranges:?} invalid for shape {:?}",
                x.shape()
            ));
        }
        let out_shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
        let start: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        let mut out = Tensor::zeros(&out_shape);
        let mut big = x.data().to_vec();
        copy_box(&mut big, x.shape(), out.data_mut(), &out_shape, &start, false);
        self.tape().record("slice", &[self], out, SliceGrad { start })
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid!("concat of zero tensors"))?;
        let values: Vec<_> = parts.iter().map(|v| v.value()).collect();
        let rank = values[0].rank();
        if axis >= rank {
            return Err(invalid!("concat axis {axis} invalid for rank {rank}"));
        }
        let mut out_shape = values[0].shape().to_vec();
        out_shape[axis] = 0;
        for v in &values {
            let ok = v.rank() == rank
                && v
                    .shape()
                    .iter()
                    .zip(values[0].shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err!(
                    "concat of {:?} and {:?} along {axis}",
                    values[0].shape(),
                    v.shape()
                ));
            }
            out_shape[axis] += v.shape()[axis];
        }
        let mut out = Tensor::zeros(&out_shape);
        let mut offset = vec![0; rank];
        for v in &values {
            let mut src = v.data().to_vec();
            copy_box(out.data_mut(), &out_shape, &mut src, v.shape(), &offset, true);
            offset[axis] += v.shape()[axis];
        }
        first
            .tape()
            .record("concat", parts, out, ConcatGrad { axis })
    }

    /// Nearest-neighbour upsampling of the two trailing axes of an
    /// `[N, C, H, W]` tensor by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 4 || factor == 0 {
            return Err(invalid!(
                "upsample by {factor} of shape {:?}",
                x.shape()
            ));
        }
        if factor == 1 {
            return Ok(self);
        }
        let s = x.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = x.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for y in 0..oh {
                let row = &xd[p * h * w + (y / factor) * w..][..w];
                for xx in 0..ow {
                    out.push(row[xx / factor]);
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        self.tape()
            .record("upsample", &[self], value, UpsampleGrad { factor })
    }
}
