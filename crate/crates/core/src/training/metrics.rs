use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{RelationLabel, NUM_CLASSES};

/// Counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (RelationLabel, RelationLabel)>) -> Self {
        let mut c = Confusion::default();
        for (t, p) in pairs {
            c.add(t, p);
        }
        c
    }

    pub fn add(&mut self, truth: RelationLabel, predicted: RelationLabel) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (v, o) in row.iter_mut().zip(orow) {
                *v += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Ground-truth samples of class `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    /// Samples predicted as class `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }
}

impl fmt::Display for Confusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "truth\\pred")?;
        for l in RelationLabel::ALL {
            write!(f, "{:>8}", l.glyph())?;
        }
        writeln!(f)?;
        for (l, row) in RelationLabel::ALL.iter().zip(&self.counts) {
            write!(f, "{:>10}", l.glyph())?;
            for v in row {
                write!(f, "{v:>8}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Mean recall over the classes that occur in the ground truth.
pub fn balanced_accuracy(c: &Confusion) -> Result<f64> {
    let recalls: Vec<f64> = (0..NUM_CLASSES)
        .filter(|&k| c.support(k) > 0)
        .map(|k| c.counts[k][k] as f64 / c.support(k) as f64)
        .collect();
    if recalls.is_empty() {
        return Err(Error::Empty("confusion matrix has no samples".into()));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// One-vs-rest F1 per class; 0 when precision and recall are both 0 or undefined.
pub fn per_class_f1(c: &Confusion) -> [f64; NUM_CLASSES] {
    std::array::from_fn(|k| {
        let tp = c.counts[k][k] as f64;
        let (support, predicted) = (c.support(k) as f64, c.predicted(k) as f64);
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if support > 0.0 { tp / support } else { 0.0 };
        if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        }
    })
}
