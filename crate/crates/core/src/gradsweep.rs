//! Finite-difference sweep over every differentiable op, layer and
//! attention block at 64-bit precision. Each case reduces its output to a
//! scalar through a fixed random projection so gradients are O(1).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{cbam_apply, channel_gate, spatial_gate, SpatialAttentionSpec};
use crate::error::Result;
use crate::model::{ForwardOptions, Model, ModelConfig, Variant};
use crate::nn::{
    batchnorm2d_eval, batchnorm2d_train, conv2d, cross_entropy, depthwise_separable_conv, global_pool, linear,
    maxpool2d, Conv2dSpec, DepthwiseSeparable, MaxPoolSpec, PoolKind, BN_EPS,
};
use crate::tensor::gradcheck::grad_check_multi;
use crate::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Linear maps have no truncation error, so the bar is tighter.
pub const LINEAR_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kind: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SweepRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

struct Sweep {
    rng: ChaCha8Rng,
    rows: Vec<SweepRow>,
}

type Case = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

impl Sweep {
    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.rng.random_range(-1.0..1.0)).collect()).expect("shape")
    }

    fn positive(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.rng.random_range(0.5..1.5)).collect()).expect("shape")
    }

    /// Records one case; `f` produces a non-scalar output which is
    /// projected onto a random direction of matching shape.
    fn check(
        &mut self,
        kind: &'static str,
        tolerance: f64,
        inputs: Vec<Tensor<f64>>,
        coords: Option<Vec<(usize, usize)>>,
        f: Case,
    ) -> Result<()> {
        let probe = {
            let tape = Tape::new();
            let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            f(&tape, &vars)?.shape()
        };
        let dir = self.tensor(&probe);
        let err = grad_check_multi(
            |tape, vars| {
                let y = f(tape, vars)?;
                y.mul(tape.constant(dir.clone()))?.sum_all()
            },
            &inputs,
            coords.as_deref(),
            FD_STEP,
        )?;
        match self.rows.iter_mut().find(|r| r.kind == kind) {
            Some(r) => {
                r.cases += 1;
                r.max_rel_err = r.max_rel_err.max(err);
            }
            None => self.rows.push(SweepRow {
                kind,
                cases: 1,
                max_rel_err: err,
                tolerance,
            }),
        }
        Ok(())
    }

    /// Up to `k` random coordinates per input.
    fn sample_coords(&mut self, inputs: &[Tensor<f64>], k: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, t) in inputs.iter().enumerate() {
            if t.len() <= k {
                out.extend((0..t.len()).map(|j| (i, j)));
            } else {
                out.extend((0..k).map(|_| (i, self.rng.random_range(0..t.len()))));
            }
        }
        out
    }
}

fn conv_cases() -> Vec<Conv2dSpec> {
    vec![
        Conv2dSpec::new(3, 4, 3).padding(1),
        Conv2dSpec::new(2, 3, 3).stride(2),
        Conv2dSpec::new(2, 2, 3).dilation(2).padding(2),
        Conv2dSpec::new(4, 6, 3).groups(2).padding(1),
        Conv2dSpec::new(4, 4, 3).groups(4).padding(1).stride(2),
        Conv2dSpec::new(3, 2, 1).with_bias(true),
        Conv2dSpec::new(2, 2, 5).padding(2).with_bias(true),
    ]
}

/// Runs the whole sweep; one row per kind with the worst error seen.
pub fn gradcheck_sweep(seed: u64) -> Result<Vec<SweepRow>> {
    let mut s = Sweep {
        rng: ChaCha8Rng::seed_from_u64(seed),
        rows: Vec::new(),
    };

    // linear maps
    let (a, b) = (s.tensor(&[3, 4]), s.tensor(&[4, 5]));
    s.check("matmul", LINEAR_TOLERANCE, vec![a, b], None, Box::new(|_, v| v[0].matmul(v[1])))?;
    let (x, w, bias) = (s.tensor(&[2, 6]), s.tensor(&[6, 3]), s.tensor(&[3]));
    s.check(
        "linear",
        LINEAR_TOLERANCE,
        vec![x, w, bias],
        None,
        Box::new(|_, v| linear(v[0], v[1], Some(v[2]))),
    )?;

    // elementwise and broadcast
    let (a, b) = (s.tensor(&[2, 3, 4]), s.tensor(&[3, 1]));
    s.check("add", TOLERANCE, vec![a.clone(), b.clone()], None, Box::new(|_, v| v[0].add(v[1])))?;
    s.check("sub", TOLERANCE, vec![a.clone(), b.clone()], None, Box::new(|_, v| v[0].sub(v[1])))?;
    s.check("mul", TOLERANCE, vec![a.clone(), b], None, Box::new(|_, v| v[0].mul(v[1])))?;
    let d = s.positive(&[1, 4]);
    s.check("div", TOLERANCE, vec![a.clone(), d], None, Box::new(|_, v| v[0].div(v[1])))?;
    s.check("relu", TOLERANCE, vec![a.clone()], None, Box::new(|_, v| v[0].relu()))?;
    s.check("sigmoid", TOLERANCE, vec![a.clone()], None, Box::new(|_, v| v[0].sigmoid()))?;
    s.check("scale", TOLERANCE, vec![a.clone()], None, Box::new(|_, v| v[0].scale(-1.7)))?;

    // reductions
    for (axes, keep) in [(vec![1usize], true), (vec![0, 2], false)] {
        for kind in [crate::tensor::ReduceKind::Sum, crate::tensor::ReduceKind::Mean, crate::tensor::ReduceKind::Max] {
            let name = match kind {
                crate::tensor::ReduceKind::Sum => "reduce-sum",
                crate::tensor::ReduceKind::Mean => "reduce-mean",
                crate::tensor::ReduceKind::Max => "reduce-max",
            };
            let axes = axes.clone();
            s.check(
                name,
                TOLERANCE,
                vec![a.clone()],
                None,
                Box::new(move |_, v| v[0].reduce(&axes, kind, keep)),
            )?;
        }
    }

    // movement
    let x = s.tensor(&[1, 2, 3, 3]);
    s.check("reshape", TOLERANCE, vec![x.clone()], None, Box::new(|_, v| v[0].reshape(&[3, 6])))?;
    s.check(
        "pad",
        TOLERANCE,
        vec![x.clone()],
        None,
        Box::new(|_, v| v[0].pad(&[(0, 0), (0, 1), (1, 2), (2, 0)])),
    )?;
    s.check(
        "slice",
        TOLERANCE,
        vec![x.clone()],
        None,
        Box::new(|_, v| v[0].slice(&[(0, 1), (1, 2), (0, 2), (1, 3)])),
    )?;
    let y = s.tensor(&[1, 3, 3, 3]);
    s.check(
        "concat",
        TOLERANCE,
        vec![x.clone(), y],
        None,
        Box::new(|_, v| Var::concat(&[v[0], v[1]], 1)),
    )?;
    s.check("upsample", TOLERANCE, vec![x], None, Box::new(|_, v| v[0].upsample_nearest(2)))?;

    // convolutions
    for spec in conv_cases() {
        let x = s.tensor(&[2, spec.in_channels, 6, 7]);
        let w = s.tensor(&spec.weight_shape());
        let mut inputs = vec![x, w];
        if spec.bias {
            inputs.push(s.tensor(&[spec.out_channels]));
        }
        let kind = if spec.groups > 1 && spec.groups == spec.in_channels {
            "conv2d-depthwise"
        } else {
            "conv2d"
        };
        s.check(
            kind,
            TOLERANCE,
            inputs,
            None,
            Box::new(move |_, v| conv2d(v[0], v[1], v.get(2).copied(), &spec)),
        )?;
    }
    let (dw, pw) = DepthwiseSeparable::specs(3, 5, 3, 1, 2);
    let inputs = vec![s.tensor(&[2, 3, 6, 6]), s.tensor(&dw.weight_shape()), s.tensor(&pw.weight_shape())];
    s.check(
        "separable-conv",
        TOLERANCE,
        inputs,
        None,
        Box::new(move |_, v| depthwise_separable_conv(v[0], v[1], v[2], &dw, &pw)),
    )?;

    // normalization, pooling, loss
    let inputs = vec![s.tensor(&[3, 2, 3, 3]), s.positive(&[2]), s.tensor(&[2])];
    s.check(
        "batchnorm-train",
        TOLERANCE,
        inputs.clone(),
        None,
        Box::new(|_, v| Ok(batchnorm2d_train(v[0], v[1], v[2], BN_EPS)?.0)),
    )?;
    let (rm, rv) = (s.tensor(&[2]), s.positive(&[2]));
    s.check(
        "batchnorm-eval",
        TOLERANCE,
        inputs,
        None,
        Box::new(move |_, v| batchnorm2d_eval(v[0], v[1], v[2], &rm, &rv, BN_EPS)),
    )?;
    let x = s.tensor(&[2, 2, 7, 7]);
    for spec in [
        MaxPoolSpec { kernel: 3, stride: 2, padding: 1 },
        MaxPoolSpec { kernel: 2, stride: 2, padding: 0 },
    ] {
        s.check("maxpool", TOLERANCE, vec![x.clone()], None, Box::new(move |_, v| maxpool2d(v[0], spec)))?;
    }
    s.check(
        "global-avg-pool",
        TOLERANCE,
        vec![x.clone()],
        None,
        Box::new(|_, v| global_pool(v[0], PoolKind::Avg)),
    )?;
    s.check(
        "global-max-pool",
        TOLERANCE,
        vec![x],
        None,
        Box::new(|_, v| global_pool(v[0], PoolKind::Max)),
    )?;
    let logits = s.tensor(&[4, 3]).map(|v| 3.0 * v);
    s.check(
        "cross-entropy",
        TOLERANCE,
        vec![logits],
        None,
        Box::new(|_, v| cross_entropy(v[0], &[0, 2, 1, 2])),
    )?;

    // attention
    let f = s.tensor(&[2, 8, 4, 4]);
    let (w1, w2) = (s.tensor(&[8, 2]), s.tensor(&[2, 8]));
    s.check(
        "channel-attention",
        TOLERANCE,
        vec![f.clone(), w1.clone(), w2.clone()],
        None,
        Box::new(|_, v| channel_gate(v[0], v[1], v[2])),
    )?;
    let standard = SpatialAttentionSpec::STANDARD;
    let (c1, _) = standard.conv_specs();
    let ws = s.tensor(&c1.weight_shape());
    s.check(
        "spatial-attention",
        TOLERANCE,
        vec![f.clone(), ws.clone()],
        None,
        Box::new(move |_, v| spatial_gate(v[0], &standard, v[1], None)),
    )?;
    let imp = SpatialAttentionSpec::IMPROVED;
    let (d1, d2) = imp.conv_specs();
    let d2 = d2.expect("improved spec has a pointwise conv");
    let (wi, wp) = (s.tensor(&d1.weight_shape()), s.tensor(&d2.weight_shape()));
    s.check(
        "spatial-attention-improved",
        TOLERANCE,
        vec![f.clone(), wi, wp],
        None,
        Box::new(move |_, v| spatial_gate(v[0], &imp, v[1], Some(v[2]))),
    )?;
    s.check(
        "cbam",
        TOLERANCE,
        vec![f, w1, w2, ws],
        None,
        Box::new(move |_, v| {
            let ch = channel_gate(v[0], v[1], v[2])?;
            let refined = v[0].mul(ch)?;
            let sp = spatial_gate(refined, &standard, v[3], None)?;
            cbam_apply(v[0], ch, sp)
        }),
    )?;

    // whole networks, input gradients through every block in train mode
    for variant in Variant::ALL {
        let mut cfg = ModelConfig::tiny(variant);
        cfg.base_width = 16;
        cfg.input_size = (32, 32);
        cfg.fusion_width = 32;
        let model = Model::<f64>::build(&cfg, seed)?;
        let x = s.tensor(&[2, 3, 32, 32]);
        let coords = s.sample_coords(std::slice::from_ref(&x), 16);
        let kind = match variant {
            Variant::Baseline => "network-baseline",
            Variant::Cbam => "network-cbam",
            Variant::Enhanced => "network-enhanced",
        };
        s.check(
            kind,
            TOLERANCE,
            vec![x],
            Some(coords),
            Box::new(move |tape, v| Ok(model.forward(tape, v[0], ForwardOptions::train())?.logits)),
        )?;
    }
    Ok(s.rows)
}

/// One line per kind: `kind  cases  max_rel_err  tolerance  PASS|FAIL`.
pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!(
            "{:<28} {:>3}  {:.3e}  < {:.0e}  {}\n",
            r.kind,
            r.cases,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_passes_and_covers_every_kind() {
        let rows = gradcheck_sweep(7).unwrap();
        let report = render_sweep(&rows);
        eprintln!("{report}");
        assert!(rows.iter().all(SweepRow::passed), "{report}");
        for kind in ["conv2d-depthwise", "maxpool", "cbam", "network-enhanced", "linear"] {
            assert!(rows.iter().any(|r| r.kind == kind), "{kind} missing");
        }
    }
}
