//! Flat `key = value` run configuration. Blank lines and `#` comments are
//! ignored; later keys override earlier ones.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::error::{HseError, Result};
use crate::model::{ModelConfig, Variant};
use crate::training::TrainConfig;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed of parameter init, batch order and augmentation"),
    ("variant", "full | baseline | no-serl | no-sglr (sets both switches below)"),
    ("enable_serl", "guided attention pathway on levels >= 2"),
    ("enable_sglr", "KL label regularization on levels >= 2"),
    ("detach_guidance", "treat parent scores fed to the semantic mapper as constants"),
    ("in_channels", "image channels"),
    ("trunk_widths", "comma-separated conv block widths"),
    ("feature_dim", "branch feature channels"),
    ("semantic_dim", "semantic vector width"),
    ("attention_hidden", "hidden width of the attention map"),
    ("temperature", "softmax temperature of the regularizer"),
    ("gamma", "regularizer weight; defaults to temperature squared"),
    ("batch_size", "SGD batch size"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "L2 weight decay"),
    ("resize", "side length images are resized to"),
    ("crop", "side length of the training/evaluation crop"),
    ("stage1.lr", "initial learning rate of level-wise training"),
    ("stage1.epochs", "epochs per level in stage 1"),
    ("stage1.patience", "plateau patience in epochs"),
    ("stage1.min_delta", "smallest accuracy gain counted as progress"),
    ("stage1.max_drops", "maximum number of learning-rate drops"),
    ("stage2.lr", "initial learning rate of joint fine-tuning"),
    ("stage2.epochs", "epochs of stage 2"),
    ("stage2.patience", "plateau patience in epochs"),
    ("stage2.min_delta", "smallest accuracy gain counted as progress"),
    ("stage2.max_drops", "maximum number of learning-rate drops"),
    ("synth.image_size", "generated image side length"),
    ("synth.branching", "comma-separated children per level"),
    ("synth.train", "training images per leaf"),
    ("synth.val", "validation images per leaf"),
    ("synth.test", "test images per leaf"),
    ("synth.noise", "amplitude of additive pixel noise"),
    ("synth.seed", "generator seed"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Level sizes are filled in from the taxonomy.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig {
                level_sizes: Vec::new(),
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| HseError::Config(format!("invalid value {v:?} for {key}")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| value(key, p.trim())).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HseError::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| HseError::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HseError::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| HseError::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synthetic;
        match key {
            "seed" => self.seed = value(key, v)?,
            "variant" => {
                let variant = Variant::parse(v).ok_or_else(|| HseError::Config(format!("unknown variant {v:?}")))?;
                (m.enable_serl, m.enable_sglr) = variant.flags();
            }
            "enable_serl" => m.enable_serl = value(key, v)?,
            "enable_sglr" => m.enable_sglr = value(key, v)?,
            "detach_guidance" => m.detach_guidance = value(key, v)?,
            "in_channels" => m.in_channels = value(key, v)?,
            "trunk_widths" => m.trunk_widths = list(key, v)?,
            "feature_dim" => m.feature_dim = value(key, v)?,
            "semantic_dim" => m.semantic_dim = value(key, v)?,
            "attention_hidden" => m.attention_hidden = value(key, v)?,
            "temperature" => m.temperature = value(key, v)?,
            "gamma" => m.gamma = Some(value(key, v)?),
            "batch_size" => t.batch_size = value(key, v)?,
            "momentum" => t.momentum = value(key, v)?,
            "weight_decay" => t.weight_decay = value(key, v)?,
            "resize" => t.augment.resize = value(key, v)?,
            "crop" => t.augment.crop = value(key, v)?,
            "synth.image_size" => s.image_size = value(key, v)?,
            "synth.branching" => s.branching = list(key, v)?,
            "synth.train" => s.per_leaf[0] = value(key, v)?,
            "synth.val" => s.per_leaf[1] = value(key, v)?,
            "synth.test" => s.per_leaf[2] = value(key, v)?,
            "synth.noise" => s.noise = value(key, v)?,
            "synth.seed" => s.seed = value(key, v)?,
            _ => {
                let (stage, field) = key
                    .split_once('.')
                    .ok_or_else(|| HseError::Config(format!("unknown key {key:?}")))?;
                let plan = match stage {
                    "stage1" => &mut t.stage1,
                    "stage2" => &mut t.stage2,
                    _ => return Err(HseError::Config(format!("unknown key {key:?}"))),
                };
                match field {
                    "lr" => plan.lr = value(key, v)?,
                    "epochs" => plan.epochs = value(key, v)?,
                    "patience" => plan.patience = value(key, v)?,
                    "min_delta" => plan.min_delta = value(key, v)?,
                    "max_drops" => plan.max_drops = value(key, v)?,
                    _ => return Err(HseError::Config(format!("unknown key {key:?}"))),
                }
            }
        }
        Ok(())
    }

    /// Training configuration with the run seed applied to both stages.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.set_seed(self.seed);
        t
    }

    /// Model configuration for a taxonomy's level sizes.
    pub fn model_config(&self, level_sizes: Vec<usize>) -> ModelConfig {
        ModelConfig {
            level_sizes,
            ..self.model.clone()
        }
    }

    /// Every key with its current value, in the order of [`KEYS`].
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let (m, t, s) = (&self.model, &self.train, &self.synthetic);
        let mut out = String::new();
        for &(key, _) in KEYS {
            let v = match key {
                "seed" => self.seed.to_string(),
                "variant" => continue,
                "enable_serl" => m.enable_serl.to_string(),
                "enable_sglr" => m.enable_sglr.to_string(),
                "detach_guidance" => m.detach_guidance.to_string(),
                "in_channels" => m.in_channels.to_string(),
                "trunk_widths" => join(&m.trunk_widths),
                "feature_dim" => m.feature_dim.to_string(),
                "semantic_dim" => m.semantic_dim.to_string(),
                "attention_hidden" => m.attention_hidden.to_string(),
                "temperature" => m.temperature.to_string(),
                "gamma" => m.gamma().to_string(),
                "batch_size" => t.batch_size.to_string(),
                "momentum" => t.momentum.to_string(),
                "weight_decay" => t.weight_decay.to_string(),
                "resize" => t.augment.resize.to_string(),
                "crop" => t.augment.crop.to_string(),
                "synth.image_size" => s.image_size.to_string(),
                "synth.branching" => join(&s.branching),
                "synth.train" => s.per_leaf[0].to_string(),
                "synth.val" => s.per_leaf[1].to_string(),
                "synth.test" => s.per_leaf[2].to_string(),
                "synth.noise" => s.noise.to_string(),
                "synth.seed" => s.seed.to_string(),
                _ => {
                    let (stage, field) = key.split_once('.').expect("stage key");
                    let p = if stage == "stage1" { &t.stage1 } else { &t.stage2 };
                    match field {
                        "lr" => p.lr.to_string(),
                        "epochs" => p.epochs.to_string(),
                        "patience" => p.patience.to_string(),
                        "min_delta" => p.min_delta.to_string(),
                        _ => p.max_drops.to_string(),
                    }
                }
            };
            out.push_str(&format!("{key} = {v}\n"));
        }
        out
    }
}
