use std::fmt;

use super::{Bottleneck, Model, SpatialConv, STEM_POOL};
use crate::attention::Cbam;
use crate::nn::{BatchNorm2d, Conv2d};
use crate::tensor::Scalar;

/// One row of the layer-spec dump: `name kind shape-in shape-out params`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLine {
    pub name: String,
    pub kind: &'static str,
    pub shape_in: [usize; 3],
    pub shape_out: [usize; 3],
    pub params: usize,
}

impl fmt::Display for LayerLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |v: [usize; 3]| format!("{}x{}x{}", v[0], v[1], v[2]);
        write!(
            f,
            "{} {} {} {} {}",
            self.name,
            self.kind,
            s(self.shape_in),
            s(self.shape_out),
            self.params
        )
    }
}

impl LayerLine {
    /// Parses a line produced by `Display`.
    pub fn parse(line: &str) -> Option<(String, String, usize)> {
        let mut it = line.split_whitespace();
        let name = it.next()?.to_string();
        let kind = it.next()?.to_string();
        let params = it.nth(2)?.parse().ok()?;
        Some((name, kind, params))
    }
}

struct Walker {
    lines: Vec<LayerLine>,
}

impl Walker {
    fn push(&mut self, name: &str, kind: &'static str, shape_in: [usize; 3], shape_out: [usize; 3], params: usize) {
        self.lines.push(LayerLine {
            name: name.to_string(),
            kind,
            shape_in,
            shape_out,
            params,
        });
    }

    fn conv(&mut self, name: &str, c: &Conv2d, x: [usize; 3]) -> [usize; 3] {
        let (h, w) = c.spec.output_hw(x[1], x[2]).expect("validated geometry");
        let out = [c.spec.out_channels, h, w];
        let kind = if c.spec.groups > 1 { "dwconv" } else { "conv" };
        self.push(name, kind, x, out, c.param_count());
        out
    }

    fn bn(&mut self, name: &str, b: &BatchNorm2d, x: [usize; 3]) -> [usize; 3] {
        self.push(name, "batchnorm", x, x, b.param_count());
        x
    }

    fn cbam(&mut self, name: &str, a: &Cbam, x: [usize; 3]) -> [usize; 3] {
        self.push(&format!("{name}.channel"), "channel_attention", x, x, a.channel.param_count());
        let kind = match a.spatial.spec.variant {
            crate::attention::SpatialVariant::Standard => "spatial_attention",
            crate::attention::SpatialVariant::Improved => "spatial_attention_improved",
        };
        self.push(&format!("{name}.spatial"), kind, x, x, a.spatial.param_count());
        x
    }

    fn block(&mut self, b: &Bottleneck, x: [usize; 3]) -> [usize; 3] {
        let n = &b.name;
        let y = self.conv(&format!("{n}.conv1"), &b.conv1, x);
        let y = self.bn(&format!("{n}.bn1"), &b.bn1, y);
        let y = match &b.conv2 {
            SpatialConv::Dense(c) => self.conv(&format!("{n}.conv2"), c, y),
            SpatialConv::Separable(s) => {
                let y = self.conv(&format!("{n}.conv2.dw"), &s.depthwise, y);
                self.conv(&format!("{n}.conv2.pw"), &s.pointwise, y)
            }
        };
        let y = self.bn(&format!("{n}.bn2"), &b.bn2, y);
        let y = self.conv(&format!("{n}.conv3"), &b.conv3, y);
        let mut y = self.bn(&format!("{n}.bn3"), &b.bn3, y);
        if let Some(a) = &b.attention {
            y = self.cbam(&format!("{n}.cbam"), a, y);
        }
        if let Some((c, bn)) = &b.shortcut {
            let s = self.conv(&format!("{n}.down"), c, x);
            self.bn(&format!("{n}.down_bn"), bn, s);
        }
        self.push(&format!("{n}.add"), "residual_add", y, y, 0);
        y
    }
}

pub(crate) fn describe<T: Scalar>(m: &Model<T>) -> Vec<LayerLine> {
    let mut w = Walker { lines: Vec::new() };
    let (h, wd) = m.config.input_size;
    let x = [3, h, wd];
    let y = w.conv("stem.conv", &m.stem.conv, x);
    let y = w.bn("stem.bn", &m.stem.bn, y);
    let (ph, pw) = STEM_POOL.output_hw(y[1], y[2]).expect("validated geometry");
    let mut y2 = [y[0], ph, pw];
    w.push("stem.pool", "maxpool", y, y2, 0);
    let mut taps = Vec::new();
    for blocks in &m.stages {
        for b in blocks {
            y2 = w.block(b, y2);
        }
        taps.push(y2);
    }
    if let Some(f) = &m.fusion {
        let mut target = [0; 3];
        for (i, (lat, tap)) in f.laterals.iter().zip(&taps[1..]).enumerate() {
            let l = w.conv(&format!("fusion.lateral{}", i + 3), lat, *tap);
            if i == 0 {
                target = l;
            } else if l != target {
                w.push(&format!("fusion.up{}", i + 3), "upsample", l, target, 0);
            }
        }
        let s = w.conv("fusion.smooth.dw", &f.smooth.depthwise, target);
        y2 = w.conv("fusion.smooth.pw", &f.smooth.pointwise, s);
    }
    let pooled = [y2[0], 1, 1];
    w.push("head.pool", "global_avg_pool", y2, pooled, 0);
    w.push(
        "head.fc",
        "linear",
        pooled,
        [m.head.out_features, 1, 1],
        m.head.param_count(),
    );
    w.lines
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};

    #[test]
    fn dump_recount_matches_store() {
        for v in Variant::ALL {
            for cfg in [ModelConfig::tiny(v), ModelConfig::resnet50(v)] {
                let m = Model::<f32>::build(&cfg, 0).unwrap();
                let text: String = m.layer_table().iter().map(|l| format!("{l}\n")).collect();
                let recount: usize = text.lines().map(|l| LayerLine::parse(l).unwrap().2).sum();
                assert_eq!(recount, m.param_count().total, "{v}");
            }
        }
    }

    #[test]
    fn resnet50_stage_geometry() {
        let m = Model::<f32>::build(&ModelConfig::resnet50(Variant::Baseline), 0).unwrap();
        let t = m.layer_table();
        let out = |name: &str| t.iter().find(|l| l.name == name).unwrap().shape_out;
        assert_eq!(out("stage2.2.add"), [256, 56, 56]);
        assert_eq!(out("stage3.3.add"), [512, 28, 28]);
        assert_eq!(out("stage4.5.add"), [1024, 14, 14]);
        assert_eq!(out("stage5.2.add"), [2048, 7, 7]);
        assert_eq!(out("head.fc"), [4, 1, 1]);
        // torchvision's resnet50 minus its 1000-way head, plus a 4-way head
        assert_eq!(m.param_count().total, 23_508_032 + 2048 * 4 + 4);
    }

    #[test]
    fn enhanced_fusion_geometry() {
        let m = Model::<f32>::build(&ModelConfig::resnet50(Variant::Enhanced), 0).unwrap();
        let t = m.layer_table();
        let out = |name: &str| t.iter().find(|l| l.name == name).unwrap().shape_out;
        assert_eq!(out("stage5.2.add"), [2048, 14, 14]);
        assert_eq!(out("fusion.smooth.pw"), [256, 28, 28]);
    }
}
