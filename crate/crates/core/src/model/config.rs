use crate::error::{HseError, Result};
use crate::losses;
use crate::taxonomy::Taxonomy;

/// Architecture and objective settings of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Class count per level, coarsest first.
    pub level_sizes: Vec<usize>,
    pub in_channels: usize,
    /// Output channels of the trunk's conv blocks (conv 3×3 → relu → 2×2 max-pool each).
    pub trunk_widths: Vec<usize>,
    /// Channels `C` of each branch's feature maps.
    pub feature_dim: usize,
    /// Width of the semantic vector produced from the parent scores.
    pub semantic_dim: usize,
    /// Hidden width of the two-layer attention map.
    pub attention_hidden: usize,
    /// Guided attention pathway at levels ≥ 2.
    pub enable_serl: bool,
    /// KL label regularization at levels ≥ 2.
    pub enable_sglr: bool,
    /// Treat the parent scores feeding the semantic mapper as constants.
    pub detach_guidance: bool,
    pub temperature: f64,
    /// Regularizer weight; `None` means `temperature²`.
    pub gamma: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            level_sizes: vec![4, 8, 16],
            in_channels: 3,
            trunk_widths: vec![16, 32, 64, 64],
            feature_dim: 64,
            semantic_dim: 64,
            attention_hidden: 64,
            enable_serl: true,
            enable_sglr: true,
            detach_guidance: true,
            temperature: losses::DEFAULT_TEMPERATURE,
            gamma: None,
        }
    }
}

/// Named ablation variants of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Independent per-level heads on the shared trunk.
    Baseline,
    /// Attention guidance without label regularization.
    NoSglr,
    /// Label regularization without attention guidance.
    NoSerl,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::NoSerl, Variant::NoSglr, Variant::Full];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::NoSglr => (true, false),
            Variant::NoSerl => (false, true),
            Variant::Full => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::NoSglr => "no-sglr",
            Variant::NoSerl => "no-serl",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl ModelConfig {
    /// Full-size widths: 2048 features, 1024 semantic and attention units.
    pub fn full_scale(level_sizes: Vec<usize>) -> Self {
        ModelConfig {
            level_sizes,
            feature_dim: 2048,
            semantic_dim: 1024,
            attention_hidden: 1024,
            ..ModelConfig::default()
        }
    }

    pub fn for_taxonomy(taxonomy: &Taxonomy) -> Self {
        ModelConfig {
            level_sizes: taxonomy.level_sizes(),
            ..ModelConfig::default()
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.enable_serl, self.enable_sglr) = v.flags();
        self
    }

    pub fn levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or_else(|| losses::default_gamma(self.temperature))
    }

    pub fn trunk_channels(&self) -> usize {
        *self.trunk_widths.last().unwrap_or(&self.in_channels)
    }

    /// Spatial extent of the trunk output for a square input.
    pub fn trunk_output_size(&self, input: usize) -> usize {
        self.trunk_widths.iter().fold(input, |s, _| s / 2)
    }

    /// Whether `level` (0-based) runs the guided attention pathway.
    pub fn guided(&self, level: usize) -> bool {
        self.enable_serl && level > 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HseError::Config(m));
        if self.level_sizes.is_empty() || self.level_sizes.contains(&0) {
            return bad(format!("level sizes must be positive: {:?}", self.level_sizes));
        }
        if self.trunk_widths.is_empty() || self.trunk_widths.contains(&0) {
            return bad(format!("trunk widths must be positive: {:?}", self.trunk_widths));
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("feature_dim", self.feature_dim),
            ("semantic_dim", self.semantic_dim),
            ("attention_hidden", self.attention_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if let Some(g) = self.gamma {
            if !(g >= 0.0 && g.is_finite()) {
                return bad(format!("gamma must be non-negative, got {g}"));
            }
        }
        Ok(())
    }

    pub fn check_taxonomy(&self, taxonomy: &Taxonomy) -> Result<()> {
        if taxonomy.level_sizes() != self.level_sizes {
            return Err(HseError::Config(format!(
                "model level sizes {:?} do not match taxonomy {:?}",
                self.level_sizes,
                taxonomy.level_sizes()
            )));
        }
        Ok(())
    }
}
