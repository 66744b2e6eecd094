//! Flat `key=value` run configuration with `#` comments. Files and
//! command-line overrides apply in order, later keys winning; unknown keys
//! are errors. The resolved form is itself a valid config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::config::{parse_bool, parse_num};
use crate::model::{ModelConfig, Variant};
use crate::train::{AdamConfig, StepDecay, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub preset: String,
    pub variant: Variant,
    /// Architecture keys, applied to the preset in order.
    pub model_overrides: Vec<(String, String)>,
    pub seed: u64,
    /// Seed of the train/test and fit/validation splits; defaults to `seed`.
    pub split_seed: Option<u64>,
    pub train_ratio: f64,
    pub val_fraction: f64,
    pub exclude_small: bool,
    pub exclude_threshold: usize,
    pub lenient: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_factor: f64,
    pub lr_every: usize,
    pub adam: AdamConfig,
    pub augment: bool,
    pub max_rotation: f64,
    pub workers: usize,
    pub drop_last: bool,
    /// `None` means per-channel statistics of the fit split.
    pub normalization: Option<Normalization>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            data: None,
            preset: "tiny".into(),
            variant: Variant::Enhanced,
            model_overrides: Vec::new(),
            seed: train.seed,
            split_seed: None,
            train_ratio: 0.8,
            val_fraction: 0.2,
            exclude_small: false,
            exclude_threshold: 100,
            lenient: false,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.schedule.base,
            lr_factor: train.schedule.factor,
            lr_every: train.schedule.every,
            adam: train.adam,
            augment: train.augment,
            max_rotation: train.max_rotation,
            workers: train.workers,
            drop_last: train.drop_last,
            normalization: None,
        }
    }
}

fn parse_triple(key: &str, value: &str) -> Result<[f32; 3]> {
    let v: Vec<f32> = value
        .split(',')
        .map(|x| parse_num(key, x.trim()))
        .collect::<Result<_>>()?;
    v.try_into()
        .map_err(|_| Error::Config(format!("{key}: expected three comma-separated values")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "preset" => {
                ModelConfig::preset(value, self.variant)?;
                self.preset = value.to_string();
            }
            "variant" => self.variant = value.parse()?,
            "seed" => self.seed = parse_num(key, value)?,
            "split_seed" => self.split_seed = Some(parse_num(key, value)?),
            "train_ratio" => self.train_ratio = parse_num(key, value)?,
            "val_fraction" => self.val_fraction = parse_num(key, value)?,
            "exclude_small" => self.exclude_small = parse_bool(key, value)?,
            "exclude_threshold" => self.exclude_threshold = parse_num(key, value)?,
            "lenient" => self.lenient = parse_bool(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "lr_factor" => self.lr_factor = parse_num(key, value)?,
            "lr_every" => self.lr_every = parse_num(key, value)?,
            "beta1" => self.adam.beta1 = parse_num(key, value)?,
            "beta2" => self.adam.beta2 = parse_num(key, value)?,
            "eps" => self.adam.eps = parse_num(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "max_rotation" => self.max_rotation = parse_num(key, value)?,
            "workers" => self.workers = parse_num(key, value)?,
            "drop_last" => self.drop_last = parse_bool(key, value)?,
            "normalization" => match value {
                "dataset" => self.normalization = None,
                "identity" => self.normalization = Some(Normalization::IDENTITY),
                _ => return Err(Error::Config(format!("normalization: expected dataset or identity, got {value:?}"))),
            },
            "norm_mean" => self.normalization.get_or_insert(Normalization::IDENTITY).mean = parse_triple(key, value)?,
            "norm_std" => self.normalization.get_or_insert(Normalization::IDENTITY).std = parse_triple(key, value)?,
            _ => {
                // probe on a scratch config so typos fail here, not mid-run
                let mut scratch = ModelConfig::tiny(Variant::Baseline);
                if !scratch.set_key(key, value)? {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
                self.model_overrides.retain(|(k, _)| k != key);
                self.model_overrides.push((key.to_string(), value.to_string()));
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| {
                let msg = match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                };
                Error::Config(format!("{origin}:{}: {msg}", n + 1))
            })?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        self.apply_text(pair, "--set")
    }

    /// Defaults, then `file`, then overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad(format!("train_ratio must be in (0, 1), got {}", self.train_ratio));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if self.batch_size == 0 || self.workers == 0 || self.lr_every == 0 {
            return bad("batch_size, workers and lr_every must be at least 1".into());
        }
        if !(self.max_rotation >= 0.0 && self.max_rotation <= 180.0) {
            return bad(format!("max_rotation must be in [0, 180], got {}", self.max_rotation));
        }
        if let Some(n) = &self.normalization {
            n.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.train_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model_config(None).map(|_| ())
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }

    /// Preset for `variant`, the overrides, then `num_classes` when given
    /// and not set explicitly.
    pub fn model_config_for(&self, variant: Variant, num_classes: Option<usize>) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.preset, variant)?;
        let mut explicit_classes = false;
        for (k, v) in &self.model_overrides {
            cfg.set_key(k, v)?;
            explicit_classes |= k == "num_classes";
        }
        if let (Some(k), false) = (num_classes, explicit_classes) {
            cfg.num_classes = k;
        }
        cfg.variant = variant;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, num_classes: Option<usize>) -> Result<ModelConfig> {
        self.model_config_for(self.variant, num_classes)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: StepDecay {
                base: self.lr,
                factor: self.lr_factor,
                every: self.lr_every,
            },
            adam: self.adam,
            augment: self.augment,
            max_rotation: self.max_rotation,
            seed: self.seed,
            workers: self.workers,
            drop_last: self.drop_last,
        }
    }

    /// Every key with its effective value, followed by the resolved model
    /// architecture. Floats print in round-trip form.
    pub fn resolved_text(&self, model: &ModelConfig) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        kv("preset", self.preset.clone());
        kv("variant", model.variant.to_string());
        kv("seed", self.seed.to_string());
        kv("split_seed", self.split_seed().to_string());
        kv("train_ratio", format!("{:?}", self.train_ratio));
        kv("val_fraction", format!("{:?}", self.val_fraction));
        kv("exclude_small", self.exclude_small.to_string());
        kv("exclude_threshold", self.exclude_threshold.to_string());
        kv("lenient", self.lenient.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("lr_factor", format!("{:?}", self.lr_factor));
        kv("lr_every", self.lr_every.to_string());
        kv("beta1", format!("{:?}", self.adam.beta1));
        kv("beta2", format!("{:?}", self.adam.beta2));
        kv("eps", format!("{:?}", self.adam.eps));
        kv("augment", self.augment.to_string());
        kv("max_rotation", format!("{:?}", self.max_rotation));
        kv("workers", self.workers.to_string());
        kv("drop_last", self.drop_last.to_string());
        match &self.normalization {
            None => kv("normalization", "dataset".into()),
            Some(n) => {
                kv("norm_mean", format!("{:?},{:?},{:?}", n.mean[0], n.mean[1], n.mean[2]));
                kv("norm_std", format!("{:?},{:?},{:?}", n.std[0], n.std[1], n.std[2]));
            }
        }
        s.push_str("# resolved architecture\n");
        for line in model.to_canonical().lines().filter(|l| !l.starts_with("variant=")) {
            s.push_str(line);
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nepochs = 3  # trailing\n\nvariant=cbam\nbase_width=32\n", "t").unwrap();
        cfg.apply_override("epochs=5").unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.variant, Variant::Cbam);
        let m = cfg.model_config(Some(4)).unwrap();
        assert_eq!((m.base_width, m.num_classes), (32, 4));
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.apply_override("epoch=3"), Err(Error::Config(_))));
        assert!(cfg.apply_override("epochs=three").is_err());
        assert!(cfg.apply_override("epochs").is_err());
        assert!(cfg.apply_override("variant=resnet").is_err());
        assert!(cfg.apply_override("preset=huge").is_err());
        assert!(cfg.apply_override("norm_mean=1,2").is_err());
        assert!(RunConfig::load(None, &["train_ratio=1.5".into()]).is_err());
        assert!(RunConfig::load(None, &["attention_stages=7".into()]).is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        for o in ["variant=cbam", "lr=0.001", "norm_mean=0.5,0.25,0.125", "reduction_ratio=8", "split_seed=9"] {
            cfg.apply_override(o).unwrap();
        }
        let model = cfg.model_config(Some(4)).unwrap();
        let text = cfg.resolved_text(&model);
        let mut back = RunConfig::default();
        back.apply_text(&text, "echo").unwrap();
        assert_eq!(back.model_config(None).unwrap(), model);
        assert_eq!(back.resolved_text(&model), text);
        assert_eq!(back.train_config(), cfg.train_config());
        assert_eq!(back.normalization, cfg.normalization);
    }
}
