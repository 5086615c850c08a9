//! Hierarchy-aware metrics, prediction over datasets and attention export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::{write_pgm, Dataset};
use crate::error::{HseError, Result};
use crate::model::{predictions, HseModel, Variant};
use crate::taxonomy::{LabelPath, Taxonomy};
use crate::tensor::Tensor;
use crate::training::augment::{augment_sample, AugmentConfig};

/// How predictions are produced at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Full,
    Baseline,
    /// Baseline model; coarser predictions are read off the leaf prediction.
    Backtrack,
    NoSerl,
    NoSglr,
}

impl EvalMode {
    pub const ALL: [EvalMode; 5] = [
        EvalMode::Full,
        EvalMode::Baseline,
        EvalMode::Backtrack,
        EvalMode::NoSerl,
        EvalMode::NoSglr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Full => "full",
            EvalMode::Baseline => "baseline",
            EvalMode::Backtrack => "backtrack",
            EvalMode::NoSerl => "no-serl",
            EvalMode::NoSglr => "no-sglr",
        }
    }

    pub fn parse(s: &str) -> Option<EvalMode> {
        EvalMode::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Model variant whose checkpoint this mode evaluates.
    pub fn variant(self) -> Variant {
        match self {
            EvalMode::Full => Variant::Full,
            EvalMode::Baseline | EvalMode::Backtrack => Variant::Baseline,
            EvalMode::NoSerl => Variant::NoSerl,
            EvalMode::NoSglr => Variant::NoSglr,
        }
    }
}

/// Fused scores per level over a whole dataset, `[N, n_i]` each, using the
/// evaluation-mode center crop.
pub fn predict_dataset(model: &HseModel, data: &Dataset, aug: &AugmentConfig, batch: usize) -> Result<Vec<Tensor>> {
    let levels = model.config.levels();
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); levels];
    for chunk in data.samples.chunks(batch.max(1)) {
        let images = chunk
            .iter()
            .map(|s| augment_sample(&s.image.to_tensor(), aug, None))
            .collect::<Result<Vec<_>>>()?;
        let scores = model.predict_scores(&Tensor::stack(&images)?)?;
        for (acc, s) in rows.iter_mut().zip(&scores) {
            s.fused.check_finite("predicted scores")?;
            acc.extend_from_slice(s.fused.data());
        }
    }
    rows.into_iter()
        .zip(&model.config.level_sizes)
        .map(|(r, &n)| {
            if r.is_empty() {
                Ok(Tensor::zeros(&[0, n]))
            } else {
                Tensor::new(vec![r.len() / n, n], r)
            }
        })
        .collect()
}

/// Level-major argmax predictions.
pub fn level_predictions(scores: &[Tensor]) -> Vec<Vec<usize>> {
    scores
        .iter()
        .map(|s| if s.is_empty() { Vec::new() } else { predictions(s) })
        .collect()
}

/// Replaces every coarser prediction by the ancestor of the finest one.
pub fn backtrack(taxonomy: &Taxonomy, leaf_predictions: &[usize]) -> Result<Vec<Vec<usize>>> {
    let l = taxonomy.levels();
    let mut out = vec![Vec::with_capacity(leaf_predictions.len()); l];
    for &leaf in leaf_predictions {
        let path = taxonomy.derive_label_path(leaf)?;
        for (level, &c) in path.0.iter().enumerate() {
            out[level].push(c);
        }
    }
    Ok(out)
}

fn check_counts(preds: &[Vec<usize>], labels: &[LabelPath]) -> Result<()> {
    if let Some(p) = preds.iter().find(|p| p.len() != labels.len()) {
        return Err(HseError::InvalidArgument(format!(
            "{} predictions for {} labels",
            p.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Fraction of exact matches at every level; empty input gives zeros.
pub fn per_level_accuracy(preds: &[Vec<usize>], labels: &[LabelPath]) -> Result<Vec<f64>> {
    check_counts(preds, labels)?;
    Ok(preds
        .iter()
        .enumerate()
        .map(|(level, p)| {
            if labels.is_empty() {
                return 0.0;
            }
            let hits = p.iter().zip(labels).filter(|(&a, l)| a == l.level(level)).count();
            hits as f64 / labels.len() as f64
        })
        .collect())
}

/// `(inter, intra)` superclass error counts at a 0-based `level` ≥ 1.
pub fn error_decomposition(
    taxonomy: &Taxonomy,
    level: usize,
    preds: &[usize],
    labels: &[LabelPath],
) -> Result<(usize, usize)> {
    if level == 0 || level >= taxonomy.levels() {
        return Err(HseError::InvalidArgument(format!(
            "error decomposition needs a level in 2..={}, got {}",
            taxonomy.levels(),
            level + 1
        )));
    }
    check_counts(&[preds.to_vec()], labels)?;
    let (mut inter, mut intra) = (0, 0);
    for (&p, l) in preds.iter().zip(labels) {
        let truth = l.level(level);
        if p == truth {
            continue;
        }
        if p >= taxonomy.level_size(level) {
            return Err(HseError::OutOfRange {
                what: "predicted class",
                index: p,
                size: taxonomy.level_size(level),
            });
        }
        if taxonomy.parent(level, p) == taxonomy.parent(level, truth) {
            intra += 1;
        } else {
            inter += 1;
        }
    }
    Ok((inter, intra))
}

/// Fraction of samples whose predictions form a valid root-to-leaf path.
pub fn consistency_rate(taxonomy: &Taxonomy, preds: &[Vec<usize>]) -> f64 {
    let n = preds.first().map_or(0, Vec::len);
    if n == 0 {
        return 1.0;
    }
    let ok = (0..n)
        .filter(|&s| (1..preds.len()).all(|i| taxonomy.parent(i, preds[i][s]) == preds[i - 1][s]))
        .count();
    ok as f64 / n as f64
}

/// Relative reduction of `count` against `reference`, in percent.
pub fn relative_reduction(reference: usize, count: usize) -> Option<f64> {
    (reference > 0).then(|| 100.0 * (reference as f64 - count as f64) / reference as f64)
}

fn one_decimal(fraction: f64) -> f64 {
    (fraction * 1000.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelReport {
    pub level: usize,
    pub accuracy: f64,
    pub accuracy_percent: f64,
    pub correct: usize,
    /// Absent on the first level, which has no superclass.
    pub inter_superclass_errors: Option<usize>,
    pub intra_superclass_errors: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mode: String,
    pub samples: usize,
    pub levels: Vec<LevelReport>,
    pub consistency_rate: f64,
}

impl MetricsReport {
    pub fn build(taxonomy: &Taxonomy, mode: &str, preds: &[Vec<usize>], labels: &[LabelPath]) -> Result<Self> {
        let acc = per_level_accuracy(preds, labels)?;
        let mut levels = Vec::with_capacity(preds.len());
        for (i, p) in preds.iter().enumerate() {
            let correct = p.iter().zip(labels).filter(|(&a, l)| a == l.level(i)).count();
            let split = if i == 0 {
                None
            } else {
                Some(error_decomposition(taxonomy, i, p, labels)?)
            };
            levels.push(LevelReport {
                level: i + 1,
                accuracy: acc[i],
                accuracy_percent: one_decimal(acc[i]),
                correct,
                inter_superclass_errors: split.map(|s| s.0),
                intra_superclass_errors: split.map(|s| s.1),
            });
        }
        Ok(MetricsReport {
            mode: mode.to_string(),
            samples: labels.len(),
            levels,
            consistency_rate: consistency_rate(taxonomy, preds),
        })
    }

    /// Pretty JSON with keys in sorted order.
    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)?)
    }
}

/// Predictions and report for `mode` on a labelled dataset.
pub fn evaluate(
    model: &HseModel,
    taxonomy: &Taxonomy,
    data: &Dataset,
    aug: &AugmentConfig,
    mode: EvalMode,
) -> Result<MetricsReport> {
    model.config.check_taxonomy(taxonomy)?;
    let scores = predict_dataset(model, data, aug, 32)?;
    let mut preds = level_predictions(&scores);
    if mode == EvalMode::Backtrack {
        preds = backtrack(taxonomy, preds.last().expect("at least one level"))?;
    }
    MetricsReport::build(taxonomy, mode.name(), &preds, &data.labels())
}

/// 8-bit min-max scaling; a flat map becomes mid gray.
pub fn heatmap_pixels(map: &[f64]) -> Vec<u8> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; map.len()];
    }
    map.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Channel mean of a normalized attention tensor `[C, H, W]`.
pub fn channel_mean(attention: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = attention.shape() else {
        return Err(HseError::shape("channel_mean", format!("{:?}", attention.shape())));
    };
    let mut out = vec![0.0; h * w];
    for plane in attention.data().chunks_exact(h * w) {
        for (o, &v) in out.iter_mut().zip(plane) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    Tensor::new(vec![h, w], out)
}

/// Writes `map` as a P5 heatmap plus a sidecar text file (one row of raw
/// values per line) next to it with the extension `.txt`.
pub fn write_heatmap(map: &Tensor, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    let &[h, w] = map.shape() else {
        return Err(HseError::shape("write_heatmap", format!("{:?}", map.shape())));
    };
    write_pgm(out, w, h, &heatmap_pixels(map.data()))?;
    let mut text = String::new();
    for row in map.data().chunks_exact(w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(text, "{}", cells.join(" ")).expect("string write");
    }
    let side = out.with_extension("txt");
    fs::write(&side, text).map_err(|e| HseError::io(&side, e))
}

/// Attention heatmap of one image (`[3, H, W]`, already cropped) at a
/// guided 0-based `level`.
pub fn export_attention(model: &HseModel, image: &Tensor, level: usize, out: impl AsRef<Path>) -> Result<Tensor> {
    let batch = Tensor::stack(std::slice::from_ref(image))?;
    let e = model.attention_maps(&batch, level)?;
    let per_image = e.slice_outer(0, 1)?;
    let shape = per_image.shape()[1..].to_vec();
    let map = channel_mean(&per_image.reshape(shape)?)?;
    write_heatmap(&map, out)?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taxonomy() -> Taxonomy {
        // Two superclasses with two children each.
        Taxonomy::parse("a\tp\na\tq\nb\tr\nb\ts\n", "t").unwrap()
    }

    fn labels(leaves: &[usize]) -> Vec<LabelPath> {
        let t = taxonomy();
        leaves.iter().map(|&l| t.derive_label_path(l).unwrap()).collect()
    }

    #[test]
    fn accuracy_examples() {
        let l = labels(&[0, 1, 2, 3]);
        let exact = vec![vec![0, 0, 1, 1], vec![0, 1, 2, 3]];
        assert_eq!(per_level_accuracy(&exact, &l).unwrap(), vec![1.0, 1.0]);
        let wrong_leaf = vec![vec![0, 0, 1, 1], vec![1, 0, 3, 2]];
        assert_eq!(per_level_accuracy(&wrong_leaf, &l).unwrap(), vec![1.0, 0.0]);
        let three = vec![vec![0, 0, 1, 0], vec![0, 1, 2, 3]];
        assert_eq!(per_level_accuracy(&three, &l).unwrap()[0], 0.75);
        assert!(per_level_accuracy(&[vec![0]], &l).is_err());
    }

    #[test]
    fn decomposition_examples() {
        let t = taxonomy();
        let l = labels(&[0, 1, 2, 3]);
        assert_eq!(error_decomposition(&t, 1, &[0, 1, 2, 3], &l).unwrap(), (0, 0));
        assert_eq!(error_decomposition(&t, 1, &[1, 1, 2, 3], &l).unwrap(), (0, 1));
        assert_eq!(error_decomposition(&t, 1, &[2, 1, 2, 3], &l).unwrap(), (1, 0));
        assert_eq!(error_decomposition(&t, 1, &[3, 0, 0, 2], &l).unwrap(), (2, 2));
        assert!(error_decomposition(&t, 0, &[0, 0, 1, 1], &l).is_err());
    }

    #[test]
    fn consistency_examples() {
        let t = taxonomy();
        let bt = backtrack(&t, &[3, 0, 2, 1]).unwrap();
        assert_eq!(bt, vec![vec![1, 0, 1, 0], vec![3, 0, 2, 1]]);
        assert_eq!(consistency_rate(&t, &bt), 1.0);
        let one_bad = vec![vec![1, 0, 0, 0], vec![3, 0, 2, 1]];
        assert_eq!(consistency_rate(&t, &one_bad), 0.75);
        let single = Taxonomy::parse("a\nb\n", "t").unwrap();
        assert_eq!(consistency_rate(&single, &[vec![0, 1, 1]]), 1.0);
    }

    #[test]
    fn report_is_sorted_and_balanced() {
        let t = taxonomy();
        let l = labels(&[0, 1, 2, 3, 3]);
        let preds = vec![vec![0, 1, 1, 1, 1], vec![1, 2, 2, 3, 0]];
        let r = MetricsReport::build(&t, "full", &preds, &l).unwrap();
        let lv = &r.levels[1];
        assert_eq!(
            lv.correct + lv.inter_superclass_errors.unwrap() + lv.intra_superclass_errors.unwrap(),
            r.samples
        );
        assert_eq!(r.levels[0].accuracy_percent, 80.0);
        assert_eq!(r.consistency_rate, 0.8);
        let json = r.to_json().unwrap();
        let keys: Vec<usize> = ["consistency_rate", "levels", "mode", "samples"]
            .iter()
            .map(|k| json.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        assert!(json.contains("\"inter_superclass_errors\": null"));
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(one_decimal(0.8814), 88.1);
        assert_eq!(one_decimal(2.0 / 3.0), 66.7);
        assert_eq!(relative_reduction(40, 33), Some(17.5));
        assert_eq!(relative_reduction(0, 3), None);
    }

    #[test]
    fn heatmaps() {
        assert_eq!(heatmap_pixels(&[0.25; 4]), vec![128; 4]);
        assert_eq!(heatmap_pixels(&[0.0, 0.0, 1.0, 0.0]), vec![0, 0, 255, 0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let map = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        write_heatmap(&map, &p).unwrap();
        let side = fs::read_to_string(p.with_extension("txt")).unwrap();
        let total: f64 = side.split_whitespace().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(fs::read(&p).unwrap().starts_with(b"P5\n2 2\n255\n"));
    }

    #[test]
    fn channel_mean_of_normalized_maps_sums_to_one() {
        let e = Tensor::new(vec![2, 1, 2], vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        let m = channel_mean(&e).unwrap();
        assert_eq!(m.data(), &[0.75, 0.25]);
    }

    #[test]
    fn modes() {
        for m in EvalMode::ALL {
            assert_eq!(EvalMode::parse(m.name()), Some(m));
        }
        assert_eq!(EvalMode::Backtrack.variant(), Variant::Baseline);
    }
}
