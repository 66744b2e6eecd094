//! Convolutional block attention: a channel gate from pooled descriptors
//! through a shared bottleneck MLP, then a spatial gate from cross-channel
//! mean/max maps through a wide convolution.
//!
//! The improved variant keeps the channel branch and replaces the spatial
//! convolution by a dilated depthwise `k x k` conv over the two descriptor
//! maps followed by a 1x1 pointwise conv.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::nn::{global_pool, kaiming_normal, Conv2d, Conv2dSpec, Ctx, ParamId, ParamStore, PoolKind};
use crate::tensor::{ReduceKind, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialVariant {
    Standard,
    Improved,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialAttentionSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub variant: SpatialVariant,
}

impl SpatialAttentionSpec {
    pub const STANDARD: SpatialAttentionSpec = SpatialAttentionSpec {
        kernel: 7,
        dilation: 1,
        variant: SpatialVariant::Standard,
    };

    pub const IMPROVED: SpatialAttentionSpec = SpatialAttentionSpec {
        kernel: 7,
        dilation: 2,
        variant: SpatialVariant::Improved,
    };

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.dilation == 0 {
            return Err(invalid!(
                "spatial attention needs an odd kernel and positive dilation, got k={} d={}",
                self.kernel,
                self.dilation
            ));
        }
        Ok(())
    }

    /// `p = d (k - 1) / 2`, which preserves the spatial extent.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    /// Convolution over the `[mean; max]` descriptor map.
    pub fn conv_specs(&self) -> (Conv2dSpec, Option<Conv2dSpec>) {
        match self.variant {
            SpatialVariant::Standard => (
                Conv2dSpec::new(2, 1, self.kernel).dilation(self.dilation).padding(self.padding()),
                None,
            ),
            SpatialVariant::Improved => (
                Conv2dSpec::new(2, 2, self.kernel)
                    .groups(2)
                    .dilation(self.dilation)
                    .padding(self.padding()),
                Some(Conv2dSpec::new(2, 1, 1)),
            ),
        }
    }

    pub fn param_count(&self) -> usize {
        let (a, b) = self.conv_specs();
        a.param_count() + b.map_or(0, |s| s.param_count())
    }
}

/// Whether gates are computed or forced to one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateMode {
    #[default]
    Learned,
    Bypass,
}

/// `sigmoid(MLP(avg) + MLP(max))` with `MLP(s) = relu(s W1) W2`, as `[N, C, 1, 1]`.
pub fn channel_gate<'t, T: Scalar>(f: Var<'t, T>, w1: Var<'t, T>, w2: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(shape_err!("channel attention expects [N,C,H,W], got {s:?}"));
    }
    let (n, c) = (s[0], s[1]);
    if w1.shape() != vec![c, w2.shape()[0]] || w2.shape()[1] != c {
        return Err(shape_err!(
            "channel MLP {:?} -> {:?} does not fit {c} channels",
            w1.shape(),
            w2.shape()
        ));
    }
    let mlp = |d: Var<'t, T>| -> Result<Var<'t, T>> { d.reshape(&[n, c])?.matmul(w1)?.relu()?.matmul(w2) };
    let avg = mlp(global_pool(f, PoolKind::Avg)?)?;
    let max = mlp(global_pool(f, PoolKind::Max)?)?;
    avg.add(max)?.sigmoid()?.reshape(&[n, c, 1, 1])
}

/// Cross-channel `[mean; max]` map, `[N, 2, H, W]`.
pub fn descriptor_map<'t, T: Scalar>(f: Var<'t, T>) -> Result<Var<'t, T>> {
    if f.shape().len() != 4 {
        return Err(shape_err!("spatial attention expects [N,C,H,W], got {:?}", f.shape()));
    }
    let mean = f.reduce(&[1], ReduceKind::Mean, true)?;
    let max = f.reduce(&[1], ReduceKind::Max, true)?;
    Var::concat(&[mean, max], 1)
}

/// Spatial gate `[N, 1, H, W]`; `pointwise` is required by the improved variant.
pub fn spatial_gate<'t, T: Scalar>(
    f: Var<'t, T>,
    spec: &SpatialAttentionSpec,
    weight: Var<'t, T>,
    pointwise: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    spec.validate()?;
    let d = descriptor_map(f)?;
    let (first, second) = spec.conv_specs();
    let mut z = crate::nn::conv2d(d, weight, None, &first)?;
    match (second, pointwise) {
        (Some(pw), Some(w)) => z = crate::nn::conv2d(z, w, None, &pw)?,
        (None, None) => {}
        _ => return Err(invalid!("pointwise weight presence does not match {:?}", spec.variant)),
    }
    z.sigmoid()
}

/// `F ⊙ channel_gate ⊙ spatial_gate`, both broadcast.
pub fn cbam_apply<'t, T: Scalar>(f: Var<'t, T>, channel: Var<'t, T>, spatial: Var<'t, T>) -> Result<Var<'t, T>> {
    f.mul(channel)?.mul(spatial)
}

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub channels: usize,
    pub hidden: usize,
    pub fc1: ParamId,
    pub fc2: ParamId,
}

impl ChannelAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(invalid!("reduction ratio {reduction} does not divide {channels} channels"));
        }
        let hidden = channels / reduction;
        let w1 = kaiming_normal(&[channels, hidden], channels, rng)?;
        let w2 = kaiming_normal(&[hidden, channels], hidden, rng)?;
        Ok(ChannelAttention {
            channels,
            hidden,
            fc1: store.add(format!("{name}.fc1"), w1, true),
            fc2: store.add(format!("{name}.fc2"), w2, true),
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        channel_gate(f, cx.param(self.fc1), cx.param(self.fc2))
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels * self.hidden
    }
}

#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub spec: SpatialAttentionSpec,
    pub conv: Conv2d,
    pub pointwise: Option<Conv2d>,
}

impl SpatialAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: SpatialAttentionSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let (first, second) = spec.conv_specs();
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), first)?;
        let pointwise = match second {
            Some(pw) => Some(Conv2d::new(store, rng, &format!("{name}.pw"), pw)?),
            None => None,
        };
        Ok(SpatialAttention { spec, conv, pointwise })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let pw = self.pointwise.as_ref().map(|c| cx.param(c.weight));
        spatial_gate(f, &self.spec, cx.param(self.conv.weight), pw)
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }
}

/// Gates produced by one attention block during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GateTrace<'t, T: Scalar> {
    pub channel: Var<'t, T>,
    pub spatial: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct Cbam {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl Cbam {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        reduction: usize,
        spatial: SpatialAttentionSpec,
    ) -> Result<Self> {
        Ok(Cbam {
            channel: ChannelAttention::new(store, rng, &format!("{name}.channel"), channels, reduction)?,
            spatial: SpatialAttention::new(store, rng, &format!("{name}.spatial"), spatial)?,
        })
    }

    /// Channel gating, then spatial gating computed on the channel-refined map.
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'_, 't, T>,
        f: Var<'t, T>,
        mode: GateMode,
    ) -> Result<(Var<'t, T>, GateTrace<'t, T>)> {
        let s = f.shape();
        if s.len() != 4 || s[1] != self.channel.channels {
            return Err(shape_err!(
                "attention over {} channels got {s:?}",
                self.channel.channels
            ));
        }
        let channel = match mode {
            GateMode::Learned => self.channel.forward(cx, f)?,
            GateMode::Bypass => cx.tape.constant(Tensor::ones(&[s[0], s[1], 1, 1])),
        };
        let refined = f.mul(channel)?;
        let spatial = match mode {
            GateMode::Learned => self.spatial.forward(cx, refined)?,
            GateMode::Bypass => cx.tape.constant(Tensor::ones(&[s[0], 1, s[2], s[3]])),
        };
        let out = refined.mul(spatial)?;
        Ok((out, GateTrace { channel, spatial }))
    }

    pub fn param_count(&self) -> usize {
        self.channel.param_count() + self.spatial.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{RandomInit, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::random_with(shape, RandomInit::Normal { std: 1.0 }, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_mlp_gives_half() {
        let tape = Tape::new();
        let f = tape.constant(rand_t(&[2, 8, 3, 3], 1));
        let w1 = tape.constant(Tensor::zeros(&[8, 2]));
        let w2 = tape.constant(Tensor::zeros(&[2, 8]));
        let g = channel_gate(f, w1, w2).unwrap();
        assert_eq!(g.shape(), vec![2, 8, 1, 1]);
        assert!(g.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn spatially_constant_input_doubles_mlp() {
        let tape = Tape::new();
        let per_channel = [0.3, -1.2, 2.0, 0.7];
        let mut data = Vec::new();
        for &v in &per_channel {
            data.extend(std::iter::repeat_n(v, 6));
        }
        let f = tape.constant(Tensor::new(&[1, 4, 2, 3], data).unwrap());
        let w1 = rand_t(&[4, 2], 2);
        let w2 = rand_t(&[2, 4], 3);
        let g = channel_gate(f, tape.constant(w1.clone()), tape.constant(w2.clone())).unwrap();
        for c in 0..4 {
            let mut out = 0.0;
            for h in 0..2 {
                let mut z: f64 = 0.0;
                for i in 0..4 {
                    z += per_channel[i] * w1.data()[i * 2 + h];
                }
                out += z.max(0.0) * w2.data()[h * 4 + c];
            }
            let expect = 1.0 / (1.0 + (-2.0 * out).exp());
            assert!((g.value().data()[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_zero_weights_and_shape_law() {
        for &(k, d) in &[(3, 1), (3, 2), (7, 1), (7, 2)] {
            for variant in [SpatialVariant::Standard, SpatialVariant::Improved] {
                let spec = SpatialAttentionSpec { kernel: k, dilation: d, variant };
                let tape = Tape::new();
                let f = tape.constant(rand_t(&[2, 3, 9, 6], 4));
                let (a, b) = spec.conv_specs();
                let w = tape.constant(Tensor::zeros(&a.weight_shape()));
                let pw = b.map(|s| tape.constant(Tensor::zeros(&s.weight_shape())));
                let g = spatial_gate(f, &spec, w, pw).unwrap();
                assert_eq!(g.shape(), vec![2, 1, 9, 6]);
                assert!(g.value().data().iter().all(|&v| v == 0.5));
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let spec = SpatialAttentionSpec { kernel: 4, dilation: 1, variant: SpatialVariant::Standard };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn improved_parameter_count_and_span() {
        assert_eq!(SpatialAttentionSpec::IMPROVED.param_count(), 100);
        assert_eq!(SpatialAttentionSpec::STANDARD.param_count(), 98);
        assert_eq!(SpatialAttentionSpec::IMPROVED.conv_specs().0.span(), (13, 13));
        assert_eq!(SpatialAttentionSpec::STANDARD.conv_specs().0.span(), (7, 7));
    }

    #[test]
    fn reduction_must_divide() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ChannelAttention::new(&mut store, &mut rng, "ca", 24, 16).is_err());
    }

    #[test]
    fn cbam_gate_arithmetic() {
        let tape = Tape::new();
        let fv = rand_t(&[1, 2, 3, 3], 5);
        let f = tape.constant(fv.clone());
        let half_c = tape.constant(Tensor::full(&[1, 2, 1, 1], 0.5));
        let half_s = tape.constant(Tensor::full(&[1, 1, 3, 3], 0.5));
        let out = cbam_apply(f, half_c, half_s).unwrap().value();
        for (o, x) in out.data().iter().zip(fv.data()) {
            assert_eq!(*o, 0.25 * x);
        }
        let one_c = tape.constant(Tensor::ones(&[1, 2, 1, 1]));
        let one_s = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert_eq!(*cbam_apply(f, one_c, one_s).unwrap().value(), fv);
    }

    #[test]
    fn bypass_mode_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cbam = Cbam::new(&mut store, &mut rng, "a", 16, 4, SpatialAttentionSpec::STANDARD).unwrap();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, false);
        let fv = rand_t(&[2, 16, 5, 5], 6);
        let (out, _) = cbam.forward(&cx, tape.constant(fv.clone()), GateMode::Bypass).unwrap();
        assert_eq!(*out.value(), fv);
    }
}
