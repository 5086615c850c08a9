//! The per-level building blocks of a branch, each expressed on the graph.

use crate::error::{HseError, Result};
use crate::tensor::{Graph, Var};

/// A `weight`/`bias` pair bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub weight: Var,
    pub bias: Var,
}

/// 1×1 convolution followed by relu; the small transform applied to the
/// trunk maps on both the guided (`phi`) and unguided (`psi`) pathway.
pub fn pointwise_transform(g: &mut Graph, maps: Var, p: Affine) -> Result<Var> {
    let y = g.conv2d(maps, p.weight, p.bias, 1, 0)?;
    Ok(g.relu(y))
}

/// Single linear layer from the parent level's scores to a semantic vector.
pub fn semantic_map(g: &mut Graph, parent_scores: Var, p: Affine) -> Result<Var> {
    g.linear(parent_scores, p.weight, p.bias)
}

/// Raw attention field `ê`: one shared two-layer map (tanh after the first
/// layer) applied at every location to `[feature vector, semantic vector]`.
pub fn attention_scores(
    g: &mut Graph,
    guided_maps: Var,
    semantic: Var,
    first: Affine,
    second: Affine,
) -> Result<Var> {
    let s = g.value(guided_maps).shape().to_vec();
    if s.len() != 4 {
        return Err(HseError::shape("attention_scores", format!("maps {s:?}")));
    }
    let sem_shape = g.value(semantic).shape().to_vec();
    if sem_shape.len() != 2 || sem_shape[0] != s[0] {
        return Err(HseError::shape(
            "attention_scores",
            format!("semantic vector {sem_shape:?} for maps {s:?}"),
        ));
    }
    let locations = g.to_locations(guided_maps)?;
    let sem = g.repeat_rows(semantic, s[2] * s[3])?;
    let joint = g.concat_cols(locations, sem)?;
    let hidden = g.linear(joint, first.weight, first.bias)?;
    let hidden = g.tanh(hidden);
    let raw = g.linear(hidden, second.weight, second.bias)?;
    if g.value(raw).shape()[1] != s[1] {
        return Err(HseError::shape(
            "attention_scores",
            format!("second layer emits {} channels, maps have {}", g.value(raw).shape()[1], s[1]),
        ));
    }
    g.from_locations(raw, [s[0], s[1], s[2], s[3]])
}

/// Per-channel softmax across all locations.
pub fn normalize_attention(g: &mut Graph, raw: Var) -> Result<Var> {
    g.spatial_softmax(raw)
}

/// `f[c] = Σ_{h,w} e[c,h,w] · f̂[c,h,w]`.
pub fn attend_aggregate(g: &mut Graph, guided_maps: Var, attention: Var) -> Result<Var> {
    g.attend_aggregate(guided_maps, attention)
}

/// Unguided feature vector: transform then global average pooling.
pub fn psi_pool(g: &mut Graph, trunk: Var, p: Affine) -> Result<Var> {
    let maps = pointwise_transform(g, trunk, p)?;
    g.global_avg_pool(maps)
}

/// Score vectors of one level.
#[derive(Debug, Clone, Copy)]
pub struct FusedScores {
    pub guided: Option<Var>,
    pub unguided: Var,
    pub concat: Option<Var>,
    /// Elementwise mean of the classifier outputs present.
    pub fused: Var,
}

/// Three classifiers over the guided vector, the unguided vector and their
/// concatenation, averaged into the level's final scores.
pub fn classify_fuse(
    g: &mut Graph,
    guided: Var,
    unguided: Var,
    cls_guided: Affine,
    cls_unguided: Affine,
    cls_concat: Affine,
) -> Result<FusedScores> {
    let s_g = g.linear(guided, cls_guided.weight, cls_guided.bias)?;
    let s_u = g.linear(unguided, cls_unguided.weight, cls_unguided.bias)?;
    let both = g.concat_cols(guided, unguided)?;
    let s_c = g.linear(both, cls_concat.weight, cls_concat.bias)?;
    let fused = g.average(&[s_g, s_u, s_c])?;
    Ok(FusedScores {
        guided: Some(s_g),
        unguided: s_u,
        concat: Some(s_c),
        fused,
    })
}

/// Single-classifier head used where no guidance exists.
pub fn classify_unguided(g: &mut Graph, unguided: Var, cls: Affine) -> Result<FusedScores> {
    let s_u = g.linear(unguided, cls.weight, cls.bias)?;
    Ok(FusedScores {
        guided: None,
        unguided: s_u,
        concat: None,
        fused: s_u,
    })
}
