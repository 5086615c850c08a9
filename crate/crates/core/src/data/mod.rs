//! Datasets: manifest loading, batching and a synthetic hierarchical
//! image generator.

pub mod ppm;
pub mod synthetic;

use std::fs;
use std::path::Path;

pub use ppm::{write_pgm, RgbImage};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{HseError, Result};
use crate::rng::SplitMix64;
use crate::taxonomy::{LabelPath, Taxonomy};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Image path as written in the manifest.
    pub path: String,
    pub image: RgbImage,
    pub label: LabelPath,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<LabelPath> {
        self.samples.iter().map(|s| s.label.clone()).collect()
    }
}

/// Reads `relative_image_path<TAB>name_1<TAB>…<TAB>name_L` rows; images
/// are resolved against `image_root`. Rows are numbered from 1, counting
/// every line of the file.
pub fn load_manifest(taxonomy: &Taxonomy, manifest: impl AsRef<Path>, image_root: impl AsRef<Path>) -> Result<Dataset> {
    let manifest = manifest.as_ref();
    let text = fs::read_to_string(manifest).map_err(|e| HseError::io(manifest, e))?;
    let root = image_root.as_ref();
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let rel = fields.next().unwrap_or_default();
        let names: Vec<&str> = fields.collect();
        let label = taxonomy
            .resolve(&names)
            .map_err(|msg| HseError::UnresolvedCategory { row, msg })?;
        let image = RgbImage::load(root.join(rel))?;
        samples.push(Sample {
            path: rel.to_string(),
            image,
            label,
        });
    }
    Ok(Dataset { samples })
}

/// Writes a manifest in the format read by [`load_manifest`].
pub fn write_manifest(taxonomy: &Taxonomy, rows: &[(String, LabelPath)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (rel, label) in rows {
        out.push_str(rel);
        for (level, &c) in label.0.iter().enumerate() {
            out.push('\t');
            out.push_str(taxonomy.name(level, c));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| HseError::io(path, e))
}

/// Sample indices grouped into batches for one epoch. The order is a pure
/// function of `(seed, epoch)`; the final partial batch is kept.
pub fn batch_order(len: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        SplitMix64::derive(seed, &[0x6f72_6465_72, epoch]).shuffle(&mut order);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
