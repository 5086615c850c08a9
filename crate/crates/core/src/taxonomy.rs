//! Category hierarchies: an `L`-level tree stored as per-level name lists and
//! child→parent index maps.
//!
//! On disk a taxonomy is a TSV with one row per leaf holding the `L` names of
//! its path, coarsest first. A category is identified by its full name path,
//! so the same name may appear under different parents. Indices are assigned
//! per level in order of first appearance.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{HseError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    names: Vec<Vec<String>>,
    /// `parents[i][c]` is the parent index at level `i` of category `c` at
    /// level `i + 1` (0-based levels; `parents.len() == levels - 1`).
    parents: Vec<Vec<usize>>,
}

/// One category index per level, coarsest first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelPath(pub Vec<usize>);

impl LabelPath {
    pub fn leaf(&self) -> usize {
        *self.0.last().expect("label paths are non-empty")
    }

    pub fn level(&self, i: usize) -> usize {
        self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    TooFewLevels { levels: usize },
    EmptyLevel { level: usize },
    ParentMapLength { level: usize, expected: usize, found: usize },
    ParentOutOfRange { level: usize, index: usize, parent: usize, size: usize },
    BarrenNode { level: usize, index: usize },
    NonMonotoneSizes { level: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Levels are reported 1-based, matching the file's column order.
        match *self {
            Violation::TooFewLevels { levels } => write!(f, "taxonomy has {levels} level(s)"),
            Violation::EmptyLevel { level } => write!(f, "level {}: no categories", level + 1),
            Violation::ParentMapLength { level, expected, found } => write!(
                f,
                "level {}: parent map has {found} entries, expected {expected}",
                level + 1
            ),
            Violation::ParentOutOfRange { level, index, parent, size } => write!(
                f,
                "level {}: category {index}: parent out of range ({parent} >= {size})",
                level + 1
            ),
            Violation::BarrenNode { level, index } => {
                write!(f, "level {}: category {index}: barren node (no children)", level + 1)
            }
            Violation::NonMonotoneSizes { level } => write!(
                f,
                "level {}: fewer categories than the level above",
                level + 1
            ),
        }
    }
}

impl Taxonomy {
    /// Builds a taxonomy from explicit parts and validates it.
    pub fn from_parts(names: Vec<Vec<String>>, parents: Vec<Vec<usize>>) -> Result<Self> {
        let t = Taxonomy { names, parents };
        let violations = t.validate();
        if violations.is_empty() {
            Ok(t)
        } else {
            Err(HseError::Taxonomy(join(&violations)))
        }
    }

    /// Unchecked construction; pair with [`Taxonomy::validate`].
    pub fn from_parts_unchecked(names: Vec<Vec<String>>, parents: Vec<Vec<usize>>) -> Self {
        Taxonomy { names, parents }
    }

    /// Parses the leaf-per-row TSV format.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut levels: Option<usize> = None;
        let mut names: Vec<Vec<String>> = Vec::new();
        let mut parents: Vec<Vec<usize>> = Vec::new();
        // Full name path prefix → index at that level.
        let mut ids: Vec<HashMap<Vec<String>, usize>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| HseError::Parse {
                path: source.to_string(),
                line: lineno + 1,
                msg,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.iter().any(|c| c.trim().is_empty()) {
                return Err(parse_err("empty category name".into()));
            }
            let l = *levels.get_or_insert(cols.len());
            if cols.len() != l {
                return Err(parse_err(format!(
                    "inconsistent prefix reuse: row has {} levels, earlier rows have {l}",
                    cols.len()
                )));
            }
            if names.is_empty() {
                names = vec![Vec::new(); l];
                parents = vec![Vec::new(); l.saturating_sub(1)];
                ids = vec![HashMap::new(); l];
            }
            let mut prefix = Vec::with_capacity(l);
            let mut created_leaf = false;
            for (i, col) in cols.iter().enumerate() {
                prefix.push(col.to_string());
                if ids[i].contains_key(&prefix) {
                    continue;
                }
                let idx = names[i].len();
                ids[i].insert(prefix.clone(), idx);
                names[i].push(col.to_string());
                if i > 0 {
                    parents[i - 1].push(ids[i - 1][&prefix[..i]]);
                }
                if i == l - 1 {
                    created_leaf = true;
                }
            }
            if !created_leaf {
                return Err(parse_err(format!("duplicate leaf path {}", cols.join(" / "))));
            }
        }
        if levels.is_none() {
            return Err(HseError::Taxonomy(format!("{source}: empty taxonomy file")));
        }
        Taxonomy::from_parts(names, parents)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HseError::io(path, e))?;
        Taxonomy::parse(&text, &path.display().to_string())
    }

    /// Leaf-per-row TSV; `parse(to_tsv())` reproduces `self` exactly.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for leaf in 0..self.leaf_count() {
            let path = self.derive_label_path(leaf).expect("leaf in range");
            let row: Vec<&str> = path
                .0
                .iter()
                .enumerate()
                .map(|(i, &c)| self.names[i][c].as_str())
                .collect();
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| HseError::io(path, e))
    }

    pub fn levels(&self) -> usize {
        self.names.len()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.names.iter().map(Vec::len).collect()
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.names[level].len()
    }

    pub fn leaf_count(&self) -> usize {
        self.names.last().map_or(0, Vec::len)
    }

    pub fn name(&self, level: usize, index: usize) -> &str {
        &self.names[level][index]
    }

    /// Parent map of (0-based) `level`, which must be at least 1.
    pub fn parents(&self, level: usize) -> &[usize] {
        &self.parents[level - 1]
    }

    pub fn parent(&self, level: usize, index: usize) -> usize {
        self.parents[level - 1][index]
    }

    pub fn children(&self, level: usize, index: usize) -> Vec<usize> {
        self.parents[level]
            .iter()
            .enumerate()
            .filter(|&(_, &p)| p == index)
            .map(|(c, _)| c)
            .collect()
    }

    /// Resolves a full name path (coarsest first) to its label path.
    pub fn resolve(&self, path: &[&str]) -> std::result::Result<LabelPath, String> {
        if path.len() != self.levels() {
            return Err(format!(
                "expected {} category names, found {}",
                self.levels(),
                path.len()
            ));
        }
        let mut out = Vec::with_capacity(path.len());
        for (i, name) in path.iter().enumerate() {
            let found = (0..self.level_size(i)).find(|&c| {
                self.names[i][c] == *name && (i == 0 || self.parent(i, c) == out[i - 1])
            });
            match found {
                Some(c) => out.push(c),
                None => {
                    return Err(format!(
                        "no category {name:?} at level {} under {:?}",
                        i + 1,
                        path[..i].join(" / ")
                    ))
                }
            }
        }
        Ok(LabelPath(out))
    }

    /// Walks parent links up from a leaf.
    pub fn derive_label_path(&self, leaf: usize) -> Result<LabelPath> {
        let l = self.levels();
        if leaf >= self.leaf_count() {
            return Err(HseError::OutOfRange {
                what: "leaf index",
                index: leaf,
                size: self.leaf_count(),
            });
        }
        let mut path = vec![0; l];
        path[l - 1] = leaf;
        for i in (1..l).rev() {
            path[i - 1] = self.parent(i, path[i]);
        }
        Ok(LabelPath(path))
    }

    pub fn is_consistent(&self, path: &LabelPath) -> bool {
        path.0.len() == self.levels()
            && path.0.iter().enumerate().all(|(i, &c)| c < self.level_size(i))
            && (1..self.levels()).all(|i| self.parent(i, path.0[i]) == path.0[i - 1])
    }

    /// `out[c] = scores[parent(c)]` for every category `c` at `level`
    /// (0-based, ≥ 1); `scores` belong to `level - 1`.
    pub fn extend_scores(&self, level: usize, scores: &[f64]) -> Result<Vec<f64>> {
        if level == 0 || level >= self.levels() {
            return Err(HseError::InvalidArgument(format!(
                "score extension needs a level in 2..={}, got {}",
                self.levels(),
                level + 1
            )));
        }
        let n_prev = self.level_size(level - 1);
        if scores.len() != n_prev {
            return Err(HseError::shape(
                "extend_scores",
                format!("expected {n_prev} scores, got {}", scores.len()),
            ));
        }
        Ok(self.parents(level).iter().map(|&p| scores[p]).collect())
    }

    /// Every structural problem found; empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let l = self.names.len();
        if l < 1 {
            v.push(Violation::TooFewLevels { levels: l });
            return v;
        }
        for (i, level) in self.names.iter().enumerate() {
            if level.is_empty() {
                v.push(Violation::EmptyLevel { level: i });
            }
        }
        if self.parents.len() != l - 1 {
            v.push(Violation::ParentMapLength {
                level: 0,
                expected: l - 1,
                found: self.parents.len(),
            });
            return v;
        }
        for i in 1..l {
            let map = &self.parents[i - 1];
            let (n, n_prev) = (self.names[i].len(), self.names[i - 1].len());
            if map.len() != n {
                v.push(Violation::ParentMapLength {
                    level: i,
                    expected: n,
                    found: map.len(),
                });
                continue;
            }
            if n < n_prev {
                v.push(Violation::NonMonotoneSizes { level: i });
            }
            let mut has_child = vec![false; n_prev];
            for (c, &p) in map.iter().enumerate() {
                if p >= n_prev {
                    v.push(Violation::ParentOutOfRange {
                        level: i,
                        index: c,
                        parent: p,
                        size: n_prev,
                    });
                } else {
                    has_child[p] = true;
                }
            }
            for (p, _) in has_child.iter().enumerate().filter(|(_, &h)| !h) {
                v.push(Violation::BarrenNode { level: i - 1, index: p });
            }
        }
        v
    }
}

fn join(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Hierarchy shapes of the public benchmarks with placeholder category
/// names (`order_001`, `family_001`, …).
pub mod fixtures {
    use super::Taxonomy;

    pub const CUB: &str = include_str!("../fixtures/cub.tsv");
    pub const BUTTERFLY_200: &str = include_str!("../fixtures/butterfly200.tsv");
    pub const VEGFRU: &str = include_str!("../fixtures/vegfru.tsv");

    /// 13 orders, 37 families, 122 genera, 200 species.
    pub fn cub() -> Taxonomy {
        Taxonomy::parse(CUB, "cub.tsv").expect("bundled fixture")
    }

    /// 5 families, 23 subfamilies, 116 genera, 200 species.
    pub fn butterfly_200() -> Taxonomy {
        Taxonomy::parse(BUTTERFLY_200, "butterfly200.tsv").expect("bundled fixture")
    }

    /// 25 groups, 292 classes.
    pub fn vegfru() -> Taxonomy {
        Taxonomy::parse(VEGFRU, "vegfru.tsv").expect("bundled fixture")
    }
}
