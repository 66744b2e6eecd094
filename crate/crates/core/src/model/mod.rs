//! The three comparative architectures: a bottleneck residual network, the
//! same network with CBAM after every block of the selected stages, and the
//! enhanced network (improved CBAM, separable and dilated 3x3 convs, and
//! lateral multiscale fusion before the head).

pub mod config;
pub mod layout;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{EnhancedFlags, ModelConfig, Variant, STAGES};
pub use layout::LayerLine;

use crate::attention::{Cbam, GateMode, GateTrace};
use crate::error::{shape_err, Error, Result};
use crate::nn::{
    global_pool, maxpool2d, BatchNorm2d, Conv2d, Conv2dSpec, Ctx, DepthwiseSeparable, Linear, MaxPoolSpec,
    ParamStore, PoolKind, StatUpdate,
};
use crate::tensor::{Scalar, Tape, Var};

pub const STEM_POOL: MaxPoolSpec = MaxPoolSpec {
    kernel: 3,
    stride: 2,
    padding: 1,
};

#[derive(Clone, Debug)]
pub enum SpatialConv {
    Dense(Conv2d),
    Separable(DepthwiseSeparable),
}

impl SpatialConv {
    fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            SpatialConv::Dense(c) => c.forward(cx, x),
            SpatialConv::Separable(s) => s.forward(cx, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Stem {
    fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.bn.forward(cx, self.conv.forward(cx, x)?)?.relu()?;
        maxpool2d(y, STEM_POOL)
    }
}

#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub name: String,
    pub in_channels: usize,
    pub width: usize,
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: SpatialConv,
    pub bn2: BatchNorm2d,
    pub conv3: Conv2d,
    pub bn3: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
    pub attention: Option<Cbam>,
}

/// Geometry of one bottleneck block.
#[derive(Clone, Copy, Debug)]
pub struct BlockPlan {
    pub in_channels: usize,
    pub width: usize,
    pub stride: usize,
    pub dilation: usize,
    pub separable: bool,
}

impl Bottleneck {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        plan: BlockPlan,
        attention: Option<(usize, crate::attention::SpatialAttentionSpec)>,
    ) -> Result<Self> {
        let BlockPlan {
            in_channels,
            width,
            stride,
            dilation,
            separable,
        } = plan;
        let out = 4 * width;
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), Conv2dSpec::new(in_channels, width, 1))?;
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), width);
        let conv2 = if separable {
            let (dw, pw) = DepthwiseSeparable::specs(width, width, 3, stride, dilation);
            SpatialConv::Separable(DepthwiseSeparable::new(store, rng, &format!("{name}.conv2"), dw, pw)?)
        } else {
            let spec = Conv2dSpec::new(width, width, 3)
                .stride(stride)
                .dilation(dilation)
                .same_padding();
            SpatialConv::Dense(Conv2d::new(store, rng, &format!("{name}.conv2"), spec)?)
        };
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), width);
        let conv3 = Conv2d::new(store, rng, &format!("{name}.conv3"), Conv2dSpec::new(width, out, 1))?;
        let bn3 = BatchNorm2d::new(store, &format!("{name}.bn3"), out);
        let attention = match attention {
            Some((r, spatial)) => Some(Cbam::new(store, rng, &format!("{name}.cbam"), out, r, spatial)?),
            None => None,
        };
        let shortcut = if stride != 1 || in_channels != out {
            let spec = Conv2dSpec::new(in_channels, out, 1).stride(stride);
            Some((
                Conv2d::new(store, rng, &format!("{name}.down"), spec)?,
                BatchNorm2d::new(store, &format!("{name}.down_bn"), out),
            ))
        } else {
            None
        };
        Ok(Bottleneck {
            name: name.to_string(),
            in_channels,
            width,
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            shortcut,
            attention,
        })
    }

    pub fn out_channels(&self) -> usize {
        4 * self.width
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
        mode: GateMode,
    ) -> Result<(Var<'t, T>, Option<GateTrace<'t, T>>)> {
        let y = self.bn1.forward(cx, self.conv1.forward(cx, x)?)?.relu()?;
        let y = self.bn2.forward(cx, self.conv2.forward(cx, y)?)?.relu()?;
        let mut y = self.bn3.forward(cx, self.conv3.forward(cx, y)?)?;
        let mut trace = None;
        if let Some(a) = &self.attention {
            let (refined, t) = a.forward(cx, y, mode)?;
            y = refined;
            trace = Some(t);
        }
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(cx, conv.forward(cx, x)?)?,
            None => x,
        };
        if skip.shape() != y.shape() {
            return Err(shape_err!(
                "{}: shortcut {:?} vs main path {:?}",
                self.name,
                skip.shape(),
                y.shape()
            ));
        }
        Ok((y.add(skip)?.relu()?, trace))
    }
}

/// Lateral 1x1 projections of stages 3..=5, nearest upsampling to the
/// stage-3 grid, a sum and one separable 3x3.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub width: usize,
    pub laterals: Vec<Conv2d>,
    pub smooth: DepthwiseSeparable,
}

impl Fusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, in_channels: [usize; 3], width: usize) -> Result<Self> {
        let laterals = in_channels
            .iter()
            .zip(3..)
            .map(|(&c, s)| Conv2d::new(store, rng, &format!("fusion.lateral{s}"), Conv2dSpec::new(c, width, 1)))
            .collect::<Result<Vec<_>>>()?;
        let (dw, pw) = DepthwiseSeparable::specs(width, width, 3, 1, 1);
        let smooth = DepthwiseSeparable::new(store, rng, "fusion.smooth", dw, pw)?;
        Ok(Fusion { width, laterals, smooth })
    }

    /// Upsampling factor that brings `(h, w)` onto `(th, tw)`.
    pub fn factor(target: (usize, usize), src: (usize, usize)) -> Result<usize> {
        let f = target.0 / src.0.max(1);
        if f == 0 || src.0 * f != target.0 || src.1 * f != target.1 {
            return Err(shape_err!("cannot upsample {src:?} onto {target:?} by an integer factor"));
        }
        Ok(f)
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, stages: [Var<'t, T>; 3]) -> Result<Var<'t, T>> {
        let n = stages[0].shape()[0];
        if stages.iter().any(|s| s.shape()[0] != n) {
            return Err(shape_err!("fusion inputs disagree on batch size"));
        }
        let s0 = stages[0].shape();
        let target = (s0[2], s0[3]);
        let mut sum: Option<Var<'t, T>> = None;
        for (lat, s) in self.laterals.iter().zip(stages) {
            let sh = s.shape();
            let mut l = lat.forward(cx, s)?;
            let f = Self::factor(target, (sh[2], sh[3]))?;
            if f > 1 {
                l = l.upsample_nearest(f)?;
            }
            sum = Some(match sum {
                Some(acc) => acc.add(l)?,
                None => l,
            });
        }
        self.smooth.forward(cx, sum.expect("three lateral inputs"))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub train: bool,
    pub gates: GateMode,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            train: true,
            gates: GateMode::Learned,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions::default()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockGates<'t, T: Scalar> {
    pub stage: usize,
    pub block: usize,
    pub trace: GateTrace<'t, T>,
}

pub struct ForwardOutput<'t, T: Scalar> {
    pub logits: Var<'t, T>,
    /// `stem`, `stage2`..`stage5`, optionally `fused`, then `pooled`.
    pub features: Vec<(String, Var<'t, T>)>,
    pub gates: Vec<BlockGates<'t, T>>,
    pub updates: Vec<StatUpdate<T>>,
}

impl<'t, T: Scalar> ForwardOutput<'t, T> {
    pub fn feature(&self, name: &str) -> Option<Var<'t, T>> {
        self.features.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// Gates of the last attention block in `stage`.
    pub fn last_gates(&self, stage: usize) -> Option<GateTrace<'t, T>> {
        self.gates.iter().rev().find(|g| g.stage == stage).map(|g| g.trace)
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub stem: Stem,
    pub stages: Vec<Vec<Bottleneck>>,
    pub fusion: Option<Fusion>,
    pub head: Linear,
}

impl<T: Scalar> Model<T> {
    /// Deterministic construction: all initial values come from one stream
    /// seeded by `seed`, consumed in parameter order.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let base = config.base_width;
        let stem_spec = Conv2dSpec::new(3, base, 7).stride(2).padding(3);
        let stem = Stem {
            conv: Conv2d::new(&mut store, &mut rng, "stem.conv", stem_spec)?,
            bn: BatchNorm2d::new(&mut store, "stem.bn", base),
        };
        let flags = config.enhanced_active().clone();
        let mut in_c = base;
        let mut stages = Vec::new();
        for (si, s) in STAGES.into_iter().enumerate() {
            let width = config.stage_width(s);
            let (stride, dilation) = config.stage_stride_dilation(s);
            let attention = config
                .attention_stages
                .contains(&s)
                .then(|| (config.reduction_ratio, config.spatial_spec()));
            let mut blocks = Vec::new();
            for b in 0..config.stage_blocks[si] {
                let plan = BlockPlan {
                    in_channels: in_c,
                    width,
                    stride: if b == 0 { stride } else { 1 },
                    dilation,
                    separable: flags.dwsep_stages.contains(&s),
                };
                blocks.push(Bottleneck::new(&mut store, &mut rng, &format!("stage{s}.{b}"), plan, attention)?);
                in_c = 4 * width;
            }
            stages.push(blocks);
        }
        let fusion = if flags.multiscale_fusion {
            let sizes = config.feature_sizes()?;
            for &(h, w) in &sizes[3..] {
                Fusion::factor(sizes[2], (h, w)).map_err(|e| Error::Config(e.to_string()))?;
            }
            let chans = [3, 4, 5].map(|s| config.stage_out_channels(s));
            Some(Fusion::new(&mut store, &mut rng, chans, config.fusion_width)?)
        } else {
            None
        };
        let head_in = if fusion.is_some() { config.fusion_width } else { in_c };
        let head = Linear::new(&mut store, &mut rng, "head.fc", head_in, config.num_classes)?;
        Ok(Model {
            config: config.clone(),
            store,
            stem,
            stages,
            fusion,
            head,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, opts: ForwardOptions) -> Result<ForwardOutput<'t, T>> {
        let s = x.shape();
        let (h, w) = self.config.input_size;
        if s.len() != 4 || s[1] != 3 || (s[2], s[3]) != (h, w) {
            return Err(shape_err!("model expects [N,3,{h},{w}], got {s:?}"));
        }
        let cx = Ctx::new(tape, &self.store, opts.train);
        let mut features = Vec::new();
        let mut gates = Vec::new();
        let mut y = self.stem.forward(&cx, x)?;
        features.push(("stem".to_string(), y));
        for (si, blocks) in self.stages.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                let (out, trace) = block.forward(&cx, y, opts.gates)?;
                y = out;
                if let Some(trace) = trace {
                    gates.push(BlockGates {
                        stage: STAGES[si],
                        block: b,
                        trace,
                    });
                }
            }
            features.push((format!("stage{}", STAGES[si]), y));
        }
        if let Some(f) = &self.fusion {
            let taps = [features[2].1, features[3].1, features[4].1];
            y = f.forward(&cx, taps)?;
            features.push(("fused".to_string(), y));
        }
        let n = y.shape()[0];
        let c = y.shape()[1];
        let pooled = global_pool(y, PoolKind::Avg)?.reshape(&[n, c])?;
        features.push(("pooled".to_string(), pooled));
        let logits = self.head.forward(&cx, pooled)?;
        Ok(ForwardOutput {
            logits,
            features,
            gates,
            updates: cx.into_updates(),
        })
    }

    /// Learnable scalars in total and per top-level group, in build order.
    pub fn param_count(&self) -> ParamCount {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for e in self.store.entries().iter().filter(|e| e.trainable) {
            let g = e.name.split('.').next().unwrap_or("").to_string();
            match groups.last_mut() {
                Some((name, n)) if *name == g => *n += e.value.len(),
                _ => groups.push((g, e.value.len())),
            }
        }
        ParamCount {
            total: self.store.trainable_count(),
            groups,
        }
    }

    pub fn layer_table(&self) -> Vec<LayerLine> {
        layout::describe(self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub groups: Vec<(String, usize)>,
}
