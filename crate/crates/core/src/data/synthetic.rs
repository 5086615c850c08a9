//! Seeded synthetic hierarchy. The coarsest level picks a global shape,
//! the second a color family, the third a small marking drawn in a quadrant
//! chosen by the second-level class. Pixels are produced with integer
//! arithmetic only, so output is bit-identical on every platform.

use std::fs;
use std::path::Path;

use crate::error::{HseError, Result};
use crate::rng::SplitMix64;
use crate::taxonomy::{LabelPath, Taxonomy};

use super::ppm::RgbImage;
use super::{write_manifest, Dataset, Sample};

const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
const MARKS: [&str; 4] = ["light-spot", "dark-spot", "light-bar", "dark-bar"];
const PALETTE: [(&str, [i32; 3]); 12] = [
    ("red", [200, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [50, 70, 210]),
    ("yellow", [220, 200, 40]),
    ("magenta", [200, 50, 190]),
    ("cyan", [40, 190, 200]),
    ("orange", [235, 130, 30]),
    ("purple", [120, 50, 170]),
    ("olive", [120, 130, 30]),
    ("teal", [20, 120, 120]),
    ("pink", [240, 150, 170]),
    ("brown", [120, 70, 30]),
];

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    /// Children per node at each level, coarsest first (1 to 3 levels).
    pub branching: Vec<usize>,
    /// Samples per leaf for the train, val and test splits.
    pub per_leaf: [usize; 3],
    /// Amplitude of the additive uniform pixel noise.
    pub noise: u8,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 64,
            branching: vec![4, 2, 2],
            per_leaf: [40, 10, 30],
            noise: 24,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HseError::InvalidArgument(m));
        let b = &self.branching;
        if b.is_empty() || b.len() > 3 || b.contains(&0) {
            return bad(format!("branching must have 1 to 3 positive entries, got {b:?}"));
        }
        if b[0] > SHAPES.len() {
            return bad(format!("at most {} first-level classes", SHAPES.len()));
        }
        if b.len() >= 2 && b[0] * b[1] > PALETTE.len() {
            return bad(format!("at most {} second-level classes", PALETTE.len()));
        }
        if b.len() == 3 && b[2] > MARKS.len() {
            return bad(format!("at most {} children per second-level class", MARKS.len()));
        }
        if self.per_leaf.contains(&0) {
            return bad("sample counts must be at least 1".into());
        }
        if self.image_size < 16 {
            return bad(format!("image size {} is below 16", self.image_size));
        }
        Ok(())
    }

    pub fn leaf_count(&self) -> usize {
        self.branching.iter().product()
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        self.validate()?;
        let mut text = String::new();
        for leaf in 0..self.leaf_count() {
            let f = self.factors(leaf);
            let mut names = vec![SHAPES[f.shape].to_string()];
            if let Some(c) = f.color {
                names.push(PALETTE[c].0.to_string());
            }
            if let Some(m) = f.mark {
                names.push(MARKS[m].to_string());
            }
            text.push_str(&names.join("\t"));
            text.push('\n');
        }
        Taxonomy::parse(&text, "synthetic")
    }

    fn factors(&self, leaf: usize) -> Factors {
        let b = &self.branching;
        match b.len() {
            1 => Factors {
                shape: leaf,
                color: None,
                mark: None,
            },
            2 => Factors {
                shape: leaf / b[1],
                color: Some(leaf),
                mark: None,
            },
            _ => Factors {
                shape: leaf / (b[1] * b[2]),
                color: Some(leaf / b[2]),
                mark: Some(leaf % b[2]),
            },
        }
    }

    /// One image; a pure function of the spec, split, leaf and sample index.
    pub fn render(&self, split: usize, leaf: usize, k: usize) -> RgbImage {
        let s = self.image_size as i32;
        let f = self.factors(leaf);
        let mut rng = SplitMix64::derive(self.seed, &[split as u64, leaf as u64, k as u64]);
        let mut jitter = |amp: i32| rng.below(2 * amp as u64 + 1) as i32 - amp;

        let bg = 100 + jitter(6);
        let cx = s / 2 + jitter(s / 16);
        let cy = s / 2 + jitter(s / 16);
        let r = s * 3 / 8 + jitter(s / 32);
        let base = PALETTE[f.color.unwrap_or(f.shape)].1;
        let rgb = [base[0] + jitter(16), base[1] + jitter(16), base[2] + jitter(16)];
        // Quadrant fixed by the second-level class.
        let q = f.color.unwrap_or(0) as i32 % 4;
        let (sx, sy) = (if q % 2 == 0 { -1 } else { 1 }, if q < 2 { -1 } else { 1 });
        let mx = cx + sx * r / 2 + jitter(1);
        let my = cy + sy * r / 2 + jitter(1);
        let m = (s / 7).max(3);

        let mut img = RgbImage::new(self.image_size, self.image_size);
        for y in 0..s {
            for x in 0..s {
                let mut px = [bg; 3];
                if inside_shape(f.shape, x - cx, y - cy, r) {
                    px = rgb;
                }
                if let Some(mark) = f.mark {
                    if inside_mark(mark, x - mx, y - my, m) {
                        px = if mark % 2 == 0 { [245; 3] } else { [15; 3] };
                    }
                }
                let mut out = [0u8; 3];
                for c in 0..3 {
                    let n = jitter(self.noise as i32);
                    out[c] = (px[c] + n).clamp(0, 255) as u8;
                }
                img.set(x as usize, y as usize, out);
            }
        }
        img
    }
}

struct Factors {
    shape: usize,
    color: Option<usize>,
    mark: Option<usize>,
}

fn inside_shape(shape: usize, dx: i32, dy: i32, r: i32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => 5 * dx.abs() <= 4 * r && 5 * dy.abs() <= 4 * r,
        2 => 5 * dy <= 4 * r && 2 * dx.abs() <= dy + r,
        _ => (3 * dx.abs() <= r && dy.abs() <= r) || (3 * dy.abs() <= r && dx.abs() <= r),
    }
}

fn inside_mark(mark: usize, dx: i32, dy: i32, m: i32) -> bool {
    if mark < 2 {
        dx * dx + dy * dy <= m * m
    } else {
        3 * dy.abs() <= m && dx.abs() <= m
    }
}

impl SyntheticSpec {
    /// Split `split` (0 train, 1 val, 2 test) built in memory, leaf-major.
    pub fn dataset(&self, split: usize) -> Result<Dataset> {
        let taxonomy = self.taxonomy()?;
        let mut samples = Vec::new();
        for leaf in 0..self.leaf_count() {
            let label = taxonomy.derive_label_path(leaf)?;
            for k in 0..self.per_leaf[split] {
                samples.push(Sample {
                    path: format!("images/{}_{leaf:04}_{k:03}.ppm", SPLITS[split]),
                    image: self.render(split, leaf, k),
                    label: label.clone(),
                });
            }
        }
        Ok(Dataset { samples })
    }
}

/// Writes `{taxonomy.tsv, train.tsv, val.tsv, test.tsv, images/}` into `out`.
pub fn generate_synthetic(spec: &SyntheticSpec, out: impl AsRef<Path>) -> Result<Taxonomy> {
    let taxonomy = spec.taxonomy()?;
    let out = out.as_ref();
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| HseError::io(&images, e))?;
    taxonomy.save(out.join("taxonomy.tsv"))?;
    for (split, name) in SPLITS.iter().enumerate() {
        let mut rows = Vec::new();
        for leaf in 0..spec.leaf_count() {
            let label: LabelPath = taxonomy.derive_label_path(leaf)?;
            for k in 0..spec.per_leaf[split] {
                let rel = format!("images/{name}_{leaf:04}_{k:03}.ppm");
                spec.render(split, leaf, k).save(out.join(&rel))?;
                rows.push((rel, label.clone()));
            }
        }
        write_manifest(&taxonomy, &rows, out.join(format!("{name}.tsv")))?;
    }
    Ok(taxonomy)
}

#[cfg(test)]
mod tests {
    use super::super::load_manifest;
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            image_size: 32,
            per_leaf: [2, 1, 1],
            seed: 11,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn taxonomy_shape() {
        let t = SyntheticSpec::default().taxonomy().unwrap();
        assert_eq!(t.level_sizes(), vec![4, 8, 16]);
        assert!(t.validate().is_empty());
        let t = SyntheticSpec { branching: vec![3], ..small() }.taxonomy().unwrap();
        assert_eq!(t.level_sizes(), vec![3]);
        let t = SyntheticSpec { branching: vec![2, 3], ..small() }.taxonomy().unwrap();
        assert_eq!(t.level_sizes(), vec![2, 6]);
    }

    #[test]
    fn invalid_branching() {
        for b in [vec![], vec![5, 2, 2], vec![4, 4, 2], vec![2, 2, 5], vec![2, 0, 2], vec![2, 2, 2, 2]] {
            assert!(SyntheticSpec { branching: b, ..small() }.validate().is_err());
        }
        assert!(SyntheticSpec { per_leaf: [1, 0, 1], ..small() }.validate().is_err());
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let spec = small();
        assert_eq!(spec.render(0, 5, 1), spec.render(0, 5, 1));
        assert_ne!(spec.render(0, 5, 1), spec.render(0, 5, 2));
        let other = SyntheticSpec { seed: 12, ..small() };
        assert_ne!(spec.render(0, 5, 1), other.render(0, 5, 1));

        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic(&spec, a.path()).unwrap();
        generate_synthetic(&spec, b.path()).unwrap();
        for name in ["taxonomy.tsv", "train.tsv", "images/test_0015_000.ppm", "images/train_0003_001.ppm"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn noiseless_reference_pixels() {
        let spec = SyntheticSpec {
            noise: 0,
            ..small()
        };
        let img = spec.render(0, 0, 0);
        // Corners are background, the center belongs to the shape.
        let corner = img.get(0, 0);
        assert!(corner[0] == corner[1] && corner[1] == corner[2]);
        assert_ne!(img.get(16, 16), corner);
    }

    #[test]
    fn generated_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let t = generate_synthetic(&spec, dir.path()).unwrap();
        let loaded = Taxonomy::load(dir.path().join("taxonomy.tsv")).unwrap();
        assert_eq!(loaded, t);
        for (split, name) in SPLITS.iter().enumerate() {
            let d = load_manifest(&t, dir.path().join(format!("{name}.tsv")), dir.path()).unwrap();
            assert_eq!(d.len(), spec.per_leaf[split] * 16);
            assert!(d.samples.iter().all(|s| t.is_consistent(&s.label)));
            assert!(d.samples.iter().all(|s| s.image.width == 32 && s.image.height == 32));
            assert_eq!(d, spec.dataset(split).unwrap());
        }
    }
}
