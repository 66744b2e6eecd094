use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::attention::SpatialAttentionSpec;
use crate::error::{Error, Result};
use crate::nn::{Conv2dSpec, MaxPoolSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    Cbam,
    Enhanced,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Cbam, Variant::Enhanced];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cbam => "cbam",
            Variant::Enhanced => "enhanced",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "cbam" => Ok(Variant::Cbam),
            "enhanced" => Ok(Variant::Enhanced),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected baseline, cbam or enhanced)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnhancedFlags {
    pub multiscale_fusion: bool,
    /// Stages (2..=5) whose 3x3 convolutions become depthwise separable.
    pub dwsep_stages: BTreeSet<usize>,
    /// Stage 5 drops its stride and dilates its 3x3 convolutions by 2.
    pub dilated_stage5: bool,
}

impl EnhancedFlags {
    pub fn none() -> Self {
        EnhancedFlags {
            multiscale_fusion: false,
            dwsep_stages: BTreeSet::new(),
            dilated_stage5: false,
        }
    }

    pub fn all() -> Self {
        EnhancedFlags {
            multiscale_fusion: true,
            dwsep_stages: [4, 5].into_iter().collect(),
            dilated_stage5: true,
        }
    }

    pub fn any(&self) -> bool {
        self.multiscale_fusion || !self.dwsep_stages.is_empty() || self.dilated_stage5
    }
}

/// Declarative architecture description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Bottleneck blocks in stages 2..=5.
    pub stage_blocks: Vec<usize>,
    pub base_width: usize,
    pub num_classes: usize,
    pub input_size: (usize, usize),
    /// Stages (2..=5) whose blocks carry an attention module.
    pub attention_stages: BTreeSet<usize>,
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
    /// Dilation of the improved spatial attention.
    pub improved_dilation: usize,
    pub enhanced: EnhancedFlags,
    pub fusion_width: usize,
}

pub const STAGES: [usize; 4] = [2, 3, 4, 5];

fn all_stages() -> BTreeSet<usize> {
    STAGES.into_iter().collect()
}

impl ModelConfig {
    /// ResNet50-class: blocks [3,4,6,3], width 64, 224x224 input.
    pub fn resnet50(variant: Variant) -> Self {
        ModelConfig {
            variant,
            stage_blocks: vec![3, 4, 6, 3],
            base_width: 64,
            num_classes: 4,
            input_size: (224, 224),
            attention_stages: if variant == Variant::Baseline {
                BTreeSet::new()
            } else {
                all_stages()
            },
            reduction_ratio: 16,
            spatial_kernel: 7,
            improved_dilation: 2,
            enhanced: if variant == Variant::Enhanced {
                EnhancedFlags::all()
            } else {
                EnhancedFlags::none()
            },
            fusion_width: 256,
        }
    }

    /// Desk-scale preset: one block per stage, width 16, 64x64 input.
    pub fn tiny(variant: Variant) -> Self {
        ModelConfig {
            stage_blocks: vec![1, 1, 1, 1],
            base_width: 16,
            input_size: (64, 64),
            fusion_width: 64,
            ..Self::resnet50(variant)
        }
    }

    pub fn preset(name: &str, variant: Variant) -> Result<Self> {
        match name {
            "resnet50" => Ok(Self::resnet50(variant)),
            "tiny" => Ok(Self::tiny(variant)),
            _ => Err(Error::Config(format!("unknown preset {name:?} (expected resnet50 or tiny)"))),
        }
    }

    /// Same architecture with every attention module removed.
    pub fn skeleton(&self) -> Self {
        ModelConfig {
            attention_stages: BTreeSet::new(),
            ..self.clone()
        }
    }

    pub fn has_attention(&self) -> bool {
        !self.attention_stages.is_empty()
    }

    pub fn spatial_spec(&self) -> SpatialAttentionSpec {
        match self.variant {
            Variant::Enhanced => SpatialAttentionSpec {
                kernel: self.spatial_kernel,
                dilation: self.improved_dilation,
                ..SpatialAttentionSpec::IMPROVED
            },
            _ => SpatialAttentionSpec {
                kernel: self.spatial_kernel,
                ..SpatialAttentionSpec::STANDARD
            },
        }
    }

    pub(crate) fn enhanced_active(&self) -> &EnhancedFlags {
        static NONE: std::sync::OnceLock<EnhancedFlags> = std::sync::OnceLock::new();
        if self.variant == Variant::Enhanced {
            &self.enhanced
        } else {
            NONE.get_or_init(EnhancedFlags::none)
        }
    }

    /// Bottleneck width of stage `s` (2..=5).
    pub fn stage_width(&self, s: usize) -> usize {
        self.base_width << (s - 2)
    }

    pub fn stage_out_channels(&self, s: usize) -> usize {
        4 * self.stage_width(s)
    }

    /// `(stride, dilation)` of the first 3x3 conv of stage `s`.
    pub fn stage_stride_dilation(&self, s: usize) -> (usize, usize) {
        match s {
            2 => (1, 1),
            5 if self.enhanced_active().dilated_stage5 => (1, 2),
            _ => (2, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.stage_blocks.len() != 4 || self.stage_blocks.contains(&0) {
            return cfg_err(format!("stage_blocks must list 4 positive counts, got {:?}", self.stage_blocks));
        }
        if self.base_width == 0 || self.num_classes < 2 || self.fusion_width == 0 {
            return cfg_err("base_width and fusion_width must be positive and num_classes >= 2".into());
        }
        if let Some(s) = self
            .attention_stages
            .iter()
            .chain(&self.enhanced.dwsep_stages)
            .find(|s| !STAGES.contains(s))
        {
            return cfg_err(format!("stage {s} out of range 2..=5"));
        }
        if self.variant == Variant::Baseline && self.has_attention() {
            return cfg_err("the baseline variant carries no attention modules".into());
        }
        if self.variant == Variant::Enhanced && !self.enhanced.any() {
            return cfg_err("the enhanced variant needs at least one enhancement flag".into());
        }
        if self.has_attention() {
            self.spatial_spec().validate()?;
            for &s in &self.attention_stages {
                let c = self.stage_out_channels(s);
                if self.reduction_ratio == 0 || c % self.reduction_ratio != 0 {
                    return cfg_err(format!(
                        "reduction ratio {} does not divide {c} channels of stage {s}",
                        self.reduction_ratio
                    ));
                }
            }
        }
        self.feature_sizes().map(|_| ())
    }

    /// Spatial extents after the stem and each stage (2..=5).
    pub fn feature_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let (h, w) = self.input_size;
        let stem = Conv2dSpec::new(3, self.base_width, 7).stride(2).padding(3);
        let (h, w) = stem.output_hw(h, w).map_err(|e| Error::Config(format!("input too small: {e}")))?;
        let pool = MaxPoolSpec {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let (mut h, mut w) = pool.output_hw(h, w).map_err(|e| Error::Config(format!("input too small: {e}")))?;
        let mut sizes = vec![(h, w)];
        for s in STAGES {
            let (stride, dilation) = self.stage_stride_dilation(s);
            let spec = Conv2dSpec::new(1, 1, 3).stride(stride).dilation(dilation).same_padding();
            (h, w) = spec
                .output_hw(h, w)
                .map_err(|e| Error::Config(format!("input too small for stage {s}: {e}")))?;
            sizes.push((h, w));
        }
        Ok(sizes)
    }

    /// Canonical `key=value` text, one key per line in fixed order.
    pub fn to_canonical(&self) -> String {
        let set = |s: &BTreeSet<usize>| s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let list = |s: &[usize]| s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "variant={}\nstage_blocks={}\nbase_width={}\nnum_classes={}\ninput_size={}x{}\n\
             attention_stages={}\nreduction_ratio={}\nspatial_kernel={}\nimproved_dilation={}\n\
             multiscale_fusion={}\ndwsep_stages={}\ndilated_stage5={}\nfusion_width={}\n",
            self.variant,
            list(&self.stage_blocks),
            self.base_width,
            self.num_classes,
            self.input_size.0,
            self.input_size.1,
            set(&self.attention_stages),
            self.reduction_ratio,
            self.spatial_kernel,
            self.improved_dilation,
            self.enhanced.multiscale_fusion,
            set(&self.enhanced.dwsep_stages),
            self.enhanced.dilated_stage5,
            self.fusion_width,
        )
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::resnet50(Variant::Baseline);
        let mut seen = BTreeSet::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line {line:?}")))?;
            cfg.set_key(k.trim(), v.trim())?;
            seen.insert(k.trim().to_string());
        }
        if seen.len() != 13 {
            return Err(Error::Format(format!("config block has {} of 13 keys", seen.len())));
        }
        Ok(cfg)
    }

    /// Applies one architecture key; returns `Ok(false)` for keys that do
    /// not belong to the model.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "variant" => self.variant = value.parse()?,
            "stage_blocks" => self.stage_blocks = parse_list(key, value)?,
            "base_width" => self.base_width = parse_num(key, value)?,
            "num_classes" => self.num_classes = parse_num(key, value)?,
            "input_size" => self.input_size = parse_size(key, value)?,
            "attention_stages" => self.attention_stages = parse_list(key, value)?.into_iter().collect(),
            "reduction_ratio" => self.reduction_ratio = parse_num(key, value)?,
            "spatial_kernel" => self.spatial_kernel = parse_num(key, value)?,
            "improved_dilation" => self.improved_dilation = parse_num(key, value)?,
            "multiscale_fusion" => self.enhanced.multiscale_fusion = parse_bool(key, value)?,
            "dwsep_stages" => self.enhanced.dwsep_stages = parse_list(key, value)?.into_iter().collect(),
            "dilated_stage5" => self.enhanced.dilated_stage5 = parse_bool(key, value)?,
            "fusion_width" => self.fusion_width = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse_num<N: FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

pub(crate) fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

pub(crate) fn parse_size(key: &str, value: &str) -> Result<(usize, usize)> {
    match value.split_once('x') {
        Some((h, w)) => Ok((parse_num(key, h)?, parse_num(key, w)?)),
        None => {
            let s = parse_num(key, value)?;
            Ok((s, s))
        }
    }
}
