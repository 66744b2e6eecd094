//! Naive nested-loop references shared by the oracle and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shipnet::attention::{Cbam, GateMode, SpatialAttentionSpec};
use shipnet::nn::{conv2d_forward, maxpool2d, Conv2dSpec, Ctx, MaxPoolSpec, ParamStore};
use shipnet::tensor::{Tape, Tensor};

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Direct cross-correlation, one output element at a time.
pub fn naive_conv(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    bias: Option<&[f64]>,
    s: &Conv2dSpec,
) -> (Vec<f64>, usize, usize) {
    let (kh, kw) = s.kernel;
    let oh = (h + 2 * s.padding.0 - s.dilation.0 * (kh - 1) - 1) / s.stride.0 + 1;
    let ow = (w + 2 * s.padding.1 - s.dilation.1 * (kw - 1) - 1) / s.stride.1 + 1;
    let cin_g = c / s.groups;
    let cout_g = s.out_channels / s.groups;
    let mut out = vec![0.0; n * s.out_channels * oh * ow];
    for b in 0..n {
        for o in 0..s.out_channels {
            let g = o / cout_g;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for ci in 0..cin_g {
                        let cin = g * cin_g + ci;
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * s.stride.0 + i * s.dilation.0) as isize - s.padding.0 as isize;
                                let ix = (xo * s.stride.1 + j * s.dilation.1) as isize - s.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + cin) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((o * cin_g + ci) * kh + i) * kw + j];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * s.out_channels + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Max over each window; padded taps never win.
pub fn naive_maxpool(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), s: &MaxPoolSpec) -> Vec<f64> {
    let oh = (h + 2 * s.padding - s.kernel) / s.stride + 1;
    let ow = (w + 2 * s.padding - s.kernel) / s.stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for i in 0..s.kernel {
                    for j in 0..s.kernel {
                        let iy = (y * s.stride + i) as isize - s.padding as isize;
                        let ix = (xo * s.stride + j) as isize - s.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            m = m.max(x[(plane * h + iy as usize) * w + ix as usize]);
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// `sigmoid(MLP(avg) + MLP(max))` per sample, `[n * c]`.
pub fn naive_channel_gate(f: &[f64], (n, c, h, w): (usize, usize, usize, usize), w1: &[f64], w2: &[f64]) -> Vec<f64> {
    let hid = w1.len() / c;
    let p = h * w;
    let mlp = |d: &[f64]| -> Vec<f64> {
        let mut hidden = vec![0.0; hid];
        for (k, hv) in hidden.iter_mut().enumerate() {
            for (ci, dv) in d.iter().enumerate() {
                *hv += dv * w1[ci * hid + k];
            }
            *hv = hv.max(0.0);
        }
        (0..c).map(|co| (0..hid).map(|k| hidden[k] * w2[k * c + co]).sum()).collect()
    };
    let mut out = Vec::with_capacity(n * c);
    for b in 0..n {
        let mut avg = vec![0.0; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for ch in 0..c {
            for i in 0..p {
                let v = f[(b * c + ch) * p + i];
                avg[ch] += v / p as f64;
                max[ch] = max[ch].max(v);
            }
        }
        let (a, m) = (mlp(&avg), mlp(&max));
        out.extend(a.iter().zip(&m).map(|(x, y)| sigmoid(x + y)));
    }
    out
}

/// Spatial gate `[n * h * w]` from `[mean; max]` descriptors.
pub fn naive_spatial_gate(
    f: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    spec: &SpatialAttentionSpec,
    conv_w: &[f64],
    pw_w: Option<&[f64]>,
) -> Vec<f64> {
    let p = h * w;
    let mut desc = vec![0.0; n * 2 * p];
    for b in 0..n {
        for i in 0..p {
            let mut sum = 0.0;
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                let v = f[(b * c + ch) * p + i];
                sum += v;
                max = max.max(v);
            }
            desc[(b * 2) * p + i] = sum / c as f64;
            desc[(b * 2 + 1) * p + i] = max;
        }
    }
    let (first, second) = spec.conv_specs();
    let (mut z, oh, ow) = naive_conv(&desc, (n, 2, h, w), conv_w, None, &first);
    if let (Some(pw), Some(ww)) = (second, pw_w) {
        z = naive_conv(&z, (n, first.out_channels, oh, ow), ww, None, &pw).0;
    }
    z.into_iter().map(sigmoid).collect()
}

/// Full block: `F' = F * Mc`, `out = F' * Ms(F')`.
pub fn naive_cbam(
    f: &[f64],
    dims: (usize, usize, usize, usize),
    w1: &[f64],
    w2: &[f64],
    spec: &SpatialAttentionSpec,
    conv_w: &[f64],
    pw_w: Option<&[f64]>,
) -> Vec<f64> {
    let (n, c, h, w) = dims;
    let p = h * w;
    let mc = naive_channel_gate(f, dims, w1, w2);
    let refined: Vec<f64> = f.iter().enumerate().map(|(i, v)| v * mc[i / p]).collect();
    let ms = naive_spatial_gate(&refined, dims, spec, conv_w, pw_w);
    (0..n * c * p)
        .map(|i| {
            let (b, rem) = (i / (c * p), i % p);
            refined[i] * ms[b * p + rem]
        })
        .collect()
}

pub fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // rounded to f32 so both precisions see identical inputs
    (0..n).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A random valid conv geometry: grouped, depthwise, strided, dilated,
/// padded and rectangular kernels all occur.
pub fn random_conv_case(rng: &mut ChaCha8Rng) -> (Conv2dSpec, (usize, usize, usize, usize)) {
    loop {
        let groups = rng.random_range(1..=3usize);
        let depthwise = rng.random_bool(0.25);
        let (cin, cout) = if depthwise {
            let c = rng.random_range(1..=6usize);
            (c, c * rng.random_range(1..=2usize))
        } else {
            (groups * rng.random_range(1..=3usize), groups * rng.random_range(1..=3usize))
        };
        let groups = if depthwise { cin } else { groups };
        let spec = Conv2dSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: (rng.random_range(1..=5), rng.random_range(1..=5)),
            stride: (rng.random_range(1..=3), rng.random_range(1..=3)),
            padding: (rng.random_range(0..=3), rng.random_range(0..=3)),
            dilation: (rng.random_range(1..=3), rng.random_range(1..=3)),
            groups,
            bias: rng.random_bool(0.5),
        };
        let dims = (rng.random_range(1..=2), cin, rng.random_range(3..=11), rng.random_range(3..=11));
        if spec.output_hw(dims.2, dims.3).is_ok() {
            return (spec, dims);
        }
    }
}

/// Worst absolute deviation of the 32-bit kernel from the oracle over
/// `count` random configurations, plus how many were depthwise.
pub fn conv_oracle_sweep(count: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut depthwise = 0;
    for _ in 0..count {
        let (spec, dims) = random_conv_case(&mut rng);
        if spec.groups > 1 && spec.groups == spec.in_channels {
            depthwise += 1;
        }
        let (n, c, h, w) = dims;
        let x = random_values(&mut rng, n * c * h * w);
        let wt = random_values(&mut rng, spec.weight_shape().iter().product());
        let bias = spec.bias.then(|| random_values(&mut rng, spec.out_channels));
        let (want, oh, ow) = naive_conv(&x, dims, &wt, bias.as_deref(), &spec);
        let xt = Tensor::<f32>::from_f64(&[n, c, h, w], &x).unwrap();
        let wt32 = Tensor::<f32>::from_f64(&spec.weight_shape(), &wt).unwrap();
        let bt = bias.as_ref().map(|b| Tensor::<f32>::from_f64(&[spec.out_channels], b).unwrap());
        let got = conv2d_forward(&xt, &wt32, bt.as_ref(), &spec).unwrap();
        assert_eq!(got.shape(), &[n, spec.out_channels, oh, ow], "{spec:?}");
        worst = worst.max(max_diff(&got.to_f64_vec(), &want));
    }
    (worst, depthwise)
}

pub fn maxpool_oracle_sweep(count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let kernel = rng.random_range(1..=4usize);
        let spec = MaxPoolSpec {
            kernel,
            stride: rng.random_range(1..=3),
            padding: rng.random_range(0..=kernel / 2),
        };
        let dims = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(4..=9), rng.random_range(4..=9));
        let (n, c, h, w) = dims;
        let x = random_values(&mut rng, n * c * h * w);
        let tape = Tape::<f32>::new();
        let got = maxpool2d(tape.constant(Tensor::from_f64(&[n, c, h, w], &x).unwrap()), spec)
            .unwrap()
            .value();
        worst = worst.max(max_diff(&got.to_f64_vec(), &naive_maxpool(&x, dims, &spec)));
    }
    worst
}

/// Worst deviation of the 32-bit attention block (both spatial variants)
/// from the oracle.
pub fn attention_oracle_sweep(count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for k in 0..count {
        let spec = if k % 2 == 0 {
            SpatialAttentionSpec::STANDARD
        } else {
            SpatialAttentionSpec::IMPROVED
        };
        let reduction = [1usize, 2, 4][rng.random_range(0..3)];
        let c = reduction * rng.random_range(1..=4usize);
        let dims = (rng.random_range(1..=2), c, rng.random_range(3..=9), rng.random_range(3..=9));
        let (n, _, h, w) = dims;
        let mut store = ParamStore::<f32>::new();
        let mut init = ChaCha8Rng::seed_from_u64(rng.random());
        let cbam = Cbam::new(&mut store, &mut init, "a", c, reduction, spec).unwrap();
        let x = random_values(&mut rng, n * c * h * w);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, false);
        let (out, trace) = cbam
            .forward(&cx, tape.constant(Tensor::from_f64(&[n, c, h, w], &x).unwrap()), GateMode::Learned)
            .unwrap();
        let get = |id| store.value(id).to_f64_vec();
        let (w1, w2) = (get(cbam.channel.fc1), get(cbam.channel.fc2));
        let conv_w = get(cbam.spatial.conv.weight);
        let pw_w = cbam.spatial.pointwise.as_ref().map(|p| get(p.weight));
        let want = naive_cbam(&x, dims, &w1, &w2, &spec, &conv_w, pw_w.as_deref());
        worst = worst.max(max_diff(&out.value().to_f64_vec(), &want));
        let mc = naive_channel_gate(&x, dims, &w1, &w2);
        worst = worst.max(max_diff(&trace.channel.value().to_f64_vec(), &mc));
    }
    worst
}
