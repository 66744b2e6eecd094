//! 2-D cross-correlation with stride, zero padding, dilation and groups,
//! lowered to one GEMM per group over the whole batch.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{gemm, GradFn, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl Conv2dSpec {
    /// Square kernel, stride 1, no padding, no dilation, one group, no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    /// Padding that keeps the spatial size at stride 1: `d * (k - 1) / 2`.
    pub fn same_padding(mut self) -> Self {
        self.padding = (
            self.dilation.0 * (self.kernel.0 - 1) / 2,
            self.dilation.1 * (self.kernel.1 - 1) / 2,
        );
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
            self.dilation.0,
            self.dilation.1,
            self.groups,
        ];
        if positive.contains(&0) {
            return Err(invalid!("conv spec has a zero extent: {self:?}"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(invalid!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels,
                self.out_channels,
                self.groups
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn param_count(&self) -> usize {
        let w: usize = self.weight_shape().iter().product();
        w + if self.bias { self.out_channels } else { 0 }
    }

    /// Effective receptive span `d * (k - 1) + 1` per axis.
    pub fn span(&self) -> (usize, usize) {
        (
            self.dilation.0 * (self.kernel.0 - 1) + 1,
            self.dilation.1 * (self.kernel.1 - 1) + 1,
        )
    }

    /// `floor((H + 2p - d(k-1) - 1) / s) + 1` per axis.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.span();
        let (ph, pw) = (h + 2 * self.padding.0, w + 2 * self.padding.1);
        if ph < sh || pw < sw {
            return Err(shape_err!(
                "conv output extent < 1 for input {h}x{w} with {self:?}"
            ));
        }
        Ok(((ph - sh) / self.stride.0 + 1, (pw - sw) / self.stride.1 + 1))
    }
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    cig: usize,
    cog: usize,
}

impl Geometry {
    fn patch(&self, spec: &Conv2dSpec) -> usize {
        self.cig * spec.kernel.0 * spec.kernel.1
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

fn geometry(spec: &Conv2dSpec, x_shape: &[usize]) -> Result<Geometry> {
    spec.validate()?;
    if x_shape.len() != 4 {
        return Err(shape_err!("conv2d expects [N,C,H,W], got {x_shape:?}"));
    }
    if x_shape[1] != spec.in_channels {
        return Err(shape_err!(
            "conv2d expects {} input channels, got {}",
            spec.in_channels,
            x_shape[1]
        ));
    }
    let (ho, wo) = spec.output_hw(x_shape[2], x_shape[3])?;
    Ok(Geometry {
        n: x_shape[0],
        h: x_shape[2],
        w: x_shape[3],
        ho,
        wo,
        cig: spec.in_channels / spec.groups,
        cog: spec.out_channels / spec.groups,
    })
}

fn is_pointwise(spec: &Conv2dSpec) -> bool {
    spec.kernel == (1, 1) && spec.stride == (1, 1) && spec.padding == (0, 0)
}

/// Unfolds group `g` of the batch into `col[patch, n * P + p]`.
fn im2col<T: Scalar>(x: &[T], spec: &Conv2dSpec, geo: &Geometry, g: usize, col: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let p_len = geo.ho * geo.wo;
    let cols = geo.cols();
    let c_total = spec.in_channels;
    for c in 0..geo.cig {
        let ch = g * geo.cig + c;
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..geo.n {
                    let plane = &x[(n * c_total + ch) * geo.h * geo.w..][..geo.h * geo.w];
                    let dst = &mut dst_row[n * p_len..(n + 1) * p_len];
                    for oy in 0..geo.ho {
                        let iy = (oy * sh + i * dh) as isize - ph as isize;
                        let out_row = &mut dst[oy * geo.wo..(oy + 1) * geo.wo];
                        if iy < 0 || iy >= geo.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * geo.w..][..geo.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * sw + j * dw) as isize - pw as isize;
                            *o = if ix < 0 || ix >= geo.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back into `dx`.
fn col2im<T: Scalar>(col: &[T], spec: &Conv2dSpec, geo: &Geometry, g: usize, dx: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let p_len = geo.ho * geo.wo;
    let cols = geo.cols();
    let c_total = spec.in_channels;
    for c in 0..geo.cig {
        let ch = g * geo.cig + c;
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..geo.n {
                    let plane =
                        &mut dx[(n * c_total + ch) * geo.h * geo.w..][..geo.h * geo.w];
                    let src = &src_row[n * p_len..(n + 1) * p_len];
                    for oy in 0..geo.ho {
                        let iy = (oy * sh + i * dh) as isize - ph as isize;
                        if iy < 0 || iy >= geo.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * geo.w..][..geo.w];
                        for ox in 0..geo.wo {
                            let ix = (ox * sw + j * dw) as isize - pw as isize;
                            if ix >= 0 && ix < geo.w as isize {
                                dst[ix as usize] += src[oy * geo.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Copies channels `[c0, c0 + rows)` of an NCHW buffer into `[rows, N*P]`.
fn nchw_to_rows<T: Scalar>(src: &[T], c_total: usize, c0: usize, rows: usize, n: usize, p: usize, dst: &mut [T]) {
    for r in 0..rows {
        for b in 0..n {
            let s = &src[(b * c_total + c0 + r) * p..][..p];
            dst[r * n * p + b * p..][..p].copy_from_slice(s);
        }
    }
}

fn rows_to_nchw<T: Scalar>(src: &[T], c_total: usize, c0: usize, rows: usize, n: usize, p: usize, dst: &mut [T]) {
    for r in 0..rows {
        for b in 0..n {
            let s = &src[r * n * p + b * p..][..p];
            dst[(b * c_total + c0 + r) * p..][..p].copy_from_slice(s);
        }
    }
}

/// Plain forward evaluation without recording.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv2dSpec,
) -> Result<Tensor<T>> {
    let geo = geometry(spec, x.shape())?;
    if weight.shape() != spec.weight_shape() {
        return Err(shape_err!(
            "conv weight {:?}, expected {:?}",
            weight.shape(),
            spec.weight_shape()
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(shape_err!("conv bias {:?}", b.shape()));
        }
    }
    let p = geo.ho * geo.wo;
    let cols = geo.cols();
    let patch = geo.patch(spec);
    let mut out = Tensor::zeros(&[geo.n, spec.out_channels, geo.ho, geo.wo]);
    let mut col = vec![T::zero(); patch * cols];
    let mut y = vec![T::zero(); geo.cog * cols];
    for g in 0..spec.groups {
        if is_pointwise(spec) {
            nchw_to_rows(x.data(), spec.in_channels, g * geo.cig, geo.cig, geo.n, p, &mut col);
        } else {
            im2col(x.data(), spec, &geo, g, &mut col);
        }
        let wg = &weight.data()[g * geo.cog * patch..(g + 1) * geo.cog * patch];
        gemm(geo.cog, patch, cols, wg, false, &col, false, &mut y, false);
        if let Some(b) = bias {
            for o in 0..geo.cog {
                let bv = b.data()[g * geo.cog + o];
                for v in &mut y[o * cols..(o + 1) * cols] {
                    *v += bv;
                }
            }
        }
        rows_to_nchw(&y, spec.out_channels, g * geo.cog, geo.cog, geo.n, p, out.data_mut());
    }
    Ok(out)
}

struct Conv2dGrad {
    spec: Conv2dSpec,
}

impl<T: Scalar> GradFn<T> for Conv2dGrad {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let spec = &self.spec;
        let (x, weight) = (inputs[0], inputs[1]);
        let geo = geometry(spec, x.shape())?;
        let p = geo.ho * geo.wo;
        let cols = geo.cols();
        let patch = geo.patch(spec);
        let need_x = needs[0];
        let need_w = needs[1];
        let need_b = needs.get(2).copied().unwrap_or(false);

        let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
        let mut gw = need_w.then(|| Tensor::zeros(weight.shape()));
        let mut gb = need_b.then(|| Tensor::zeros(&[spec.out_channels]));
        let mut dy = vec![T::zero(); geo.cog * cols];
        let mut col = vec![T::zero(); patch * cols];
        for g in 0..spec.groups {
            nchw_to_rows(grad.data(), spec.out_channels, g * geo.cog, geo.cog, geo.n, p, &mut dy);
            if let Some(gb) = gb.as_mut() {
                for o in 0..geo.cog {
                    let mut acc = T::zero();
                    for &v in &dy[o * cols..(o + 1) * cols] {
                        acc += v;
                    }
                    gb.data_mut()[g * geo.cog + o] = acc;
                }
            }
            if let Some(gw) = gw.as_mut() {
                if is_pointwise(spec) {
                    nchw_to_rows(x.data(), spec.in_channels, g * geo.cig, geo.cig, geo.n, p, &mut col);
                } else {
                    im2col(x.data(), spec, &geo, g, &mut col);
                }
                let dwg = &mut gw.data_mut()[g * geo.cog * patch..(g + 1) * geo.cog * patch];
                gemm(geo.cog, cols, patch, &dy, false, &col, true, dwg, false);
            }
            if let Some(gx) = gx.as_mut() {
                let wg = &weight.data()[g * geo.cog * patch..(g + 1) * geo.cog * patch];
                gemm(patch, geo.cog, cols, wg, true, &dy, false, &mut col, false);
                if is_pointwise(spec) {
                    let c_total = spec.in_channels;
                    for r in 0..geo.cig {
                        for b in 0..geo.n {
                            let s = &col[r * cols + b * p..][..p];
                            let d = &mut gx.data_mut()[(b * c_total + g * geo.cig + r) * p..][..p];
                            for (dv, &sv) in d.iter_mut().zip(s) {
                                *dv += sv;
                            }
                        }
                    }
                } else {
                    col2im(&col, spec, &geo, g, gx.data_mut());
                }
            }
        }
        let mut out = vec![gx, gw];
        if needs.len() > 2 {
            out.push(gb);
        }
        Ok(out)
    }
}

/// Recorded convolution; `bias` must be present iff `spec.bias`.
pub fn conv2d<'t, T: Scalar>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    spec: &Conv2dSpec,
) -> Result<Var<'t, T>> {
    if bias.is_some() != spec.bias {
        return Err(invalid!("bias presence does not match spec.bias = {}", spec.bias));
    }
    let bias_value = bias.map(|b| b.value());
    let out = conv2d_forward(&x.value(), &weight.value(), bias_value.as_deref(), spec)?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    x.tape()
        .record("conv2d", &inputs, out, Conv2dGrad { spec: *spec })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn seq(shape: &[usize], start: f64) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        Tensor::from_f64(shape, &(0..n).map(|i| start + i as f64).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn one_by_one_identity() {
        let x = seq(&[1, 1, 3, 3], 1.0);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d_forward(&x, &w, None, &Conv2dSpec::new(1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn window_sum() {
        let x = seq(&[1, 1, 3, 3], 1.0);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, None, &Conv2dSpec::new(1, 1, 3)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[45.0]);
    }

    #[test]
    fn dilated_taps() {
        let x = Tensor::ones(&[1, 1, 5, 5]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let spec = Conv2dSpec::new(1, 1, 3).dilation(2);
        assert_eq!(spec.span(), (5, 5));
        let y = conv2d_forward::<f32>(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn spec_errors() {
        assert!(Conv2dSpec::new(3, 4, 3).groups(2).validate().is_err());
        let x = Tensor::<f32>::ones(&[1, 2, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, &Conv2dSpec::new(1, 1, 3)).is_err());
        let x = Tensor::<f32>::ones(&[1, 1, 2, 2]);
        assert!(conv2d_forward(&x, &w, None, &Conv2dSpec::new(1, 1, 3)).is_err());
    }

    #[test]
    fn param_count_law() {
        assert_eq!(Conv2dSpec::new(2, 4, 3).with_bias(true).param_count(), 76);
        assert_eq!(Conv2dSpec::new(64, 64, 3).param_count(), 36864);
        assert_eq!(Conv2dSpec::new(64, 64, 3).groups(64).param_count(), 576);
    }

    #[test]
    fn bias_presence_checked() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let spec = Conv2dSpec::new(1, 1, 1).with_bias(true);
        assert!(conv2d(x, w, None, &spec).is_err());
    }
}
