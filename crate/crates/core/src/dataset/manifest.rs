use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Train/validation/test fractions of the 3394/500/200 image split.
pub const PAPER_SPLIT_RATIOS: [f64; 3] = [3394.0 / 4094.0, 500.0 / 4094.0, 200.0 / 4094.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Malformed(format!("unknown split {s:?}")))
    }
}

/// Sizes of the three splits: validation and test rounded to nearest,
/// the remainder goes to training.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let val = (n as f64 * ratios[1]).round() as usize;
    let test = (n as f64 * ratios[2]).round() as usize;
    if val + test > n {
        return Err(Error::invalid(format!("cannot split {n} items with ratios {ratios:?}")));
    }
    Ok([n - val - test, val, test])
}

/// Seeded shuffled partition of `0..n` into train/val/test index lists.
pub fn split_indices(n: usize, ratios: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let [train, val, _] = split_counts(n, ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(train + val);
    let val_part = order.split_off(train);
    Ok([order, val_part, test])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<(PathBuf, Split)>,
    pub seed: u64,
}

pub fn make_splits(images: &[PathBuf], ratios: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if images.is_empty() {
        return Err(Error::Empty("no images to split".into()));
    }
    let parts = split_indices(images.len(), ratios, seed)?;
    let mut entries = Vec::with_capacity(images.len());
    for (split, idx) in Split::ALL.into_iter().zip(parts) {
        entries.extend(idx.into_iter().map(|i| (images[i].clone(), split)));
    }
    Ok(DatasetManifest { entries, seed })
}

impl DatasetManifest {
    pub fn paths(&self, split: Split) -> impl Iterator<Item = &Path> {
        self.entries
            .iter()
            .filter(move |(_, s)| *s == split)
            .map(|(p, _)| p.as_path())
    }

    pub fn count(&self, split: Split) -> usize {
        self.paths(split).count()
    }

    /// `# seed\t<seed>` header, then one `<split>\t<path>` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = format!("# seed\t{}\n", self.seed);
        for (path, split) in &self.entries {
            out.push_str(&format!("{split}\t{}\n", path.display()));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seed = 0;
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("seed") {
                    seed = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Malformed(format!("line {}: bad seed", n + 1)))?;
                }
                continue;
            }
            let (split, path) = line
                .split_once('\t')
                .ok_or_else(|| Error::Malformed(format!("line {}: expected <split>\\t<path>", n + 1)))?;
            let path = PathBuf::from(path);
            if !seen.insert(path.clone()) {
                return Err(Error::Malformed(format!("line {}: {} listed twice", n + 1, path.display())));
            }
            entries.push((path, split.parse()?));
        }
        Ok(DatasetManifest { entries, seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Relative entries are resolved against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            for (p, _) in &mut m.entries {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(m)
    }
}
