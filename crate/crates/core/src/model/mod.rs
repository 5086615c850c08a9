//! The hierarchical semantic embedding network: a shared convolutional
//! trunk and one branch per level, evaluated coarsest level first.
//!
//! Level 1 (and every level when guided attention is disabled) uses the
//! unguided pathway only: `psi` transform, average pooling, one classifier.
//! Guided levels additionally map the parent level's fused scores to a
//! semantic vector, score every location of the `phi` maps against it,
//! normalize per channel over locations and pool with those weights; three
//! classifiers (guided, unguided, concatenated) are then averaged.

mod config;
pub mod ops;

use std::collections::HashMap;
use std::path::Path;

pub use config::{ModelConfig, Variant};
use ops::{Affine, FusedScores};

use crate::checkpoint;
use crate::error::{HseError, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Tensor, Var};

/// Ordered named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        ParamSet { entries, index }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Parameter handles of one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| HseError::Config(format!("model has no parameter {name}")))
    }

    fn affine(&self, prefix: &str) -> Result<Affine> {
        Ok(Affine {
            weight: self.var(&format!("{prefix}.weight"))?,
            bias: self.var(&format!("{prefix}.bias"))?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, &v)| (n.as_str(), v))
    }
}

/// Graph handles produced for one level.
#[derive(Debug, Clone, Copy)]
pub struct LevelOutput {
    pub scores: FusedScores,
    /// Raw attention field, guided levels only.
    pub raw_attention: Option<Var>,
    /// Normalized attention, guided levels only.
    pub attention: Option<Var>,
}

impl LevelOutput {
    pub fn fused(&self) -> Var {
        self.scores.fused
    }

    /// Distinct classifier outputs that carry a classification loss: the
    /// three classifiers and their mean on guided levels, the single
    /// classifier otherwise.
    pub fn loss_heads(&self) -> Vec<Var> {
        match (self.scores.guided, self.scores.concat) {
            (Some(g), Some(c)) => vec![g, self.scores.unguided, c, self.scores.fused],
            _ => vec![self.scores.fused],
        }
    }
}

/// Plain score vectors of one level for a batch, row-major `[N, n_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelScores {
    pub guided: Option<Tensor>,
    pub unguided: Tensor,
    pub concat: Option<Tensor>,
    pub fused: Tensor,
    pub extended_parent: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HseModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Branch name prefix of 0-based `level` (`branch1` is the coarsest).
pub fn branch_prefix(level: usize) -> String {
    format!("branch{}", level + 1)
}

impl HseModel {
    /// Fresh model. Trunk convolutions use fan-in uniform scaling, every
    /// other weight Xavier-uniform; all biases start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut entries = Vec::new();
        let mut rng = SplitMix64::derive(seed, &[0x7472_756e_6b]);
        let mut c_in = config.in_channels;
        for (b, &w) in config.trunk_widths.iter().enumerate() {
            let fan_in = c_in * 9;
            entries.push((format!("trunk.{b}.weight"), fan_in_uniform(&[w, c_in, 3, 3], fan_in, &mut rng)));
            entries.push((format!("trunk.{b}.bias"), Tensor::zeros(&[w])));
            c_in = w;
        }
        let c_trunk = config.trunk_channels();
        let c = config.feature_dim;
        for level in 0..config.levels() {
            let p = branch_prefix(level);
            let n = config.level_sizes[level];
            let mut rng = SplitMix64::derive(seed, &[0x6272_616e_6368, level as u64]);
            let mut affine = |name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SplitMix64| {
                entries.push((format!("{p}.{name}.weight"), xavier(shape, fan_in, fan_out, rng)));
                entries.push((format!("{p}.{name}.bias"), Tensor::zeros(&[shape[0]])));
            };
            if config.guided(level) {
                let n_prev = config.level_sizes[level - 1];
                let (s, h) = (config.semantic_dim, config.attention_hidden);
                affine("phi", &[c, c_trunk, 1, 1], c_trunk, c, &mut rng);
                affine("psi", &[c, c_trunk, 1, 1], c_trunk, c, &mut rng);
                affine("varphi", &[s, n_prev], n_prev, s, &mut rng);
                affine("attn1", &[h, c + s], c + s, h, &mut rng);
                affine("attn2", &[c, h], h, c, &mut rng);
                affine("cls_g", &[n, c], c, n, &mut rng);
                affine("cls_u", &[n, c], c, n, &mut rng);
                affine("cls_c", &[n, 2 * c], 2 * c, n, &mut rng);
            } else {
                affine("psi", &[c, c_trunk, 1, 1], c_trunk, c, &mut rng);
                affine("cls_u", &[n, c], c, n, &mut rng);
            }
        }
        Ok(HseModel {
            config,
            params: ParamSet::new(entries),
        })
    }

    /// Registers every parameter; names accepted by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Binds externally supplied handles, in parameter order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(HseError::Config(format!(
                "{} handles for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(Bound {
            vars: self.params.names().map(str::to_string).zip(vars.iter().copied()).collect(),
        })
    }

    /// Conv 3×3 (pad 1) → relu → 2×2 max-pool per block.
    pub fn trunk_forward(&self, g: &mut Graph, b: &Bound, images: Var) -> Result<Var> {
        let s = g.value(images).shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(HseError::shape(
                "trunk_forward",
                format!("images {s:?}, expected [N, {}, H, W]", self.config.in_channels),
            ));
        }
        let mut x = images;
        for blk in 0..self.config.trunk_widths.len() {
            let w = b.var(&format!("trunk.{blk}.weight"))?;
            let bias = b.var(&format!("trunk.{blk}.bias"))?;
            x = g.conv2d(x, w, bias, 1, 1)?;
            x = g.relu(x);
            x = g.max_pool2(x)?;
        }
        Ok(x)
    }

    /// One level's branch. `parent_scores` are the fused scores of the level
    /// above and are required on guided levels.
    pub fn level_forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        level: usize,
        trunk: Var,
        parent_scores: Option<Var>,
    ) -> Result<LevelOutput> {
        let p = branch_prefix(level);
        let unguided = ops::psi_pool(g, trunk, b.affine(&format!("{p}.psi"))?)?;
        if !self.config.guided(level) {
            let scores = ops::classify_unguided(g, unguided, b.affine(&format!("{p}.cls_u"))?)?;
            return Ok(LevelOutput {
                scores,
                raw_attention: None,
                attention: None,
            });
        }
        let parent = parent_scores.ok_or_else(|| {
            HseError::Config(format!("level {} needs the parent level's scores", level + 1))
        })?;
        let parent = if self.config.detach_guidance {
            g.detach(parent)
        } else {
            parent
        };
        let guided_maps = ops::pointwise_transform(g, trunk, b.affine(&format!("{p}.phi"))?)?;
        let semantic = ops::semantic_map(g, parent, b.affine(&format!("{p}.varphi"))?)?;
        let raw = ops::attention_scores(
            g,
            guided_maps,
            semantic,
            b.affine(&format!("{p}.attn1"))?,
            b.affine(&format!("{p}.attn2"))?,
        )?;
        let attention = ops::normalize_attention(g, raw)?;
        let guided = ops::attend_aggregate(g, guided_maps, attention)?;
        let scores = ops::classify_fuse(
            g,
            guided,
            unguided,
            b.affine(&format!("{p}.cls_g"))?,
            b.affine(&format!("{p}.cls_u"))?,
            b.affine(&format!("{p}.cls_c"))?,
        )?;
        Ok(LevelOutput {
            scores,
            raw_attention: Some(raw),
            attention: Some(attention),
        })
    }

    /// Levels `0..=last` from the trunk output, coarsest first.
    pub fn branches_forward(&self, g: &mut Graph, b: &Bound, trunk: Var, last: usize) -> Result<Vec<LevelOutput>> {
        let mut outs: Vec<LevelOutput> = Vec::with_capacity(last + 1);
        for level in 0..=last.min(self.config.levels() - 1) {
            let parent = outs.last().map(|o| o.fused());
            outs.push(self.level_forward(g, b, level, trunk, parent)?);
        }
        Ok(outs)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, images: Var) -> Result<Vec<LevelOutput>> {
        let trunk = self.trunk_forward(g, b, images)?;
        self.branches_forward(g, b, trunk, self.config.levels() - 1)
    }

    /// Inference on `[N, C, H, W]` images; returns plain score tensors.
    pub fn predict_scores(&self, images: &Tensor) -> Result<Vec<LevelScores>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let x = g.constant(images.clone());
        let outs = self.forward(&mut g, &b, x)?;
        let value = |v: Option<Var>| v.map(|v| g.value(v).clone());
        Ok(outs
            .iter()
            .map(|o| LevelScores {
                guided: value(o.scores.guided),
                unguided: g.value(o.scores.unguided).clone(),
                concat: value(o.scores.concat),
                fused: g.value(o.fused()).clone(),
                extended_parent: None,
            })
            .collect())
    }

    /// Normalized attention of a guided level, shape `[N, C, H, W]`.
    pub fn attention_maps(&self, images: &Tensor, level: usize) -> Result<Tensor> {
        if !self.config.guided(level) {
            return Err(HseError::Config(format!(
                "level {} has no guided attention (guidance disabled or first level)",
                level + 1
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let x = g.constant(images.clone());
        let trunk = self.trunk_forward(&mut g, &b, x)?;
        let outs = self.branches_forward(&mut g, &b, trunk, level)?;
        let e = outs[level].attention.expect("guided level");
        Ok(g.value(e).clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, self.params.entries())
    }

    /// Loads parameters for `config`; names and shapes must match exactly.
    pub fn load(config: ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let entries = checkpoint::load(path)?;
        HseModel::from_entries(config, entries)
    }

    pub fn from_entries(config: ModelConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let template = HseModel::new(config, 0)?;
        let loaded = ParamSet::new(entries);
        if loaded.len() != template.params.len() {
            return Err(HseError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                template.params.len()
            )));
        }
        for (name, t) in template.params.iter() {
            let got = loaded
                .get(name)
                .ok_or_else(|| HseError::Checkpoint(format!("missing tensor {name}")))?;
            if got.shape() != t.shape() {
                return Err(HseError::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        let ordered = template
            .params
            .names()
            .map(|n| (n.to_string(), loaded.get(n).unwrap().clone()))
            .collect();
        Ok(HseModel {
            config: template.config,
            params: ParamSet::new(ordered),
        })
    }
}

/// Argmax with ties broken towards the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax of a `[N, K]` score tensor.
pub fn predictions(scores: &Tensor) -> Vec<usize> {
    let k = scores.shape()[1];
    scores.data().chunks_exact(k).map(argmax).collect()
}
