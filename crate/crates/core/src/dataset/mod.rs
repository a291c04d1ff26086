//! Ground-truth graphs from images, the synthetic corpus, and split manifests.

mod manifest;
mod patchfiles;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{complete_graph, AssemblyGraph, Patch, RelationLabel, NUM_CLASSES};
use crate::raster::RgbImage;

pub use manifest::{make_splits, split_counts, split_indices, DatasetManifest, Split, PAPER_SPLIT_RATIOS};
pub use patchfiles::{load_patch_dir, patch_file_name, patches_from_named_images, save_patch_dir, tag_of_file_name};
pub use synth::{synth_corpus, synth_image};

/// Resize target and patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub image_w: usize,
    pub image_h: usize,
    pub patch: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            image_w: 768,
            image_h: 1280,
            patch: 256,
        }
    }
}

impl GridSpec {
    pub fn new(image_w: usize, image_h: usize, patch: usize) -> Result<Self> {
        if patch == 0 || image_w == 0 || image_h == 0 || image_w % patch != 0 || image_h % patch != 0 {
            return Err(Error::invalid(format!(
                "{image_w}x{image_h} is not an exact grid of {patch}px patches"
            )));
        }
        Ok(GridSpec {
            image_w,
            image_h,
            patch,
        })
    }

    /// Grid of `cols × rows` patches of the given size.
    pub fn with_grid(cols: usize, rows: usize, patch: usize) -> Result<Self> {
        Self::new(cols * patch, rows * patch, patch)
    }

    pub fn cols(&self) -> usize {
        self.image_w / self.patch
    }

    pub fn rows(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn patch_count(&self) -> usize {
        self.cols() * self.rows()
    }

    /// `(row, col)` of a row-major node id.
    pub fn position(&self, id: usize) -> (usize, usize) {
        (id / self.cols(), id % self.cols())
    }

    /// Relation of `target` to `source` on the grid (4-connectivity).
    pub fn relation(&self, source: usize, target: usize) -> RelationLabel {
        grid_relation(self.position(source), self.position(target))
    }
}

/// Placement of the target cell relative to the source cell, cells given as `(row, col)`.
pub fn grid_relation(source: (usize, usize), target: (usize, usize)) -> RelationLabel {
    let (sr, sc) = (source.0 as i64, source.1 as i64);
    let (tr, tc) = (target.0 as i64, target.1 as i64);
    match (tr - sr, tc - sc) {
        (-1, 0) => RelationLabel::Up,
        (1, 0) => RelationLabel::Down,
        (0, -1) => RelationLabel::Left,
        (0, 1) => RelationLabel::Right,
        _ => RelationLabel::None,
    }
}

/// Resizes to the grid's image size and cuts row-major patches, `id = row·cols + col`.
pub fn resize_and_split(image: &RgbImage, spec: &GridSpec) -> Result<Vec<Patch>> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::invalid("cannot split an empty image"));
    }
    let resized = image.resize_bilinear(spec.image_w, spec.image_h)?;
    let mut patches = Vec::with_capacity(spec.patch_count());
    for row in 0..spec.rows() {
        for col in 0..spec.cols() {
            let px = resized.crop_square(col * spec.patch, row * spec.patch, spec.patch)?;
            patches.push(Patch::new(row * spec.cols() + col, spec.patch, px, None)?);
        }
    }
    Ok(patches)
}

/// Complete graph over a split image with one-hot grid relations as edge features.
pub fn ground_truth_graph(patches: Vec<Patch>, spec: &GridSpec) -> Result<AssemblyGraph> {
    if patches.len() != spec.patch_count() {
        return Err(Error::invalid(format!(
            "{} patches for a {}x{} grid",
            patches.len(),
            spec.cols(),
            spec.rows()
        )));
    }
    if let Some(p) = patches.iter().find(|p| p.node_id() >= spec.patch_count()) {
        return Err(Error::invalid(format!("node id {} is not a grid index", p.node_id())));
    }
    let g = complete_graph(patches)?;
    let labels: Vec<RelationLabel> = g.edges().map(|e| spec.relation(e.source, e.target)).collect();
    g.with_truth(&labels)
}

/// Splits an image and builds its ground-truth graph, tagging every patch.
pub fn image_graph(image: &RgbImage, spec: &GridSpec, tag: Option<&str>) -> Result<AssemblyGraph> {
    let patches = resize_and_split(image, spec)?
        .into_iter()
        .map(|p| p.with_source_tag(tag.map(str::to_owned)))
        .collect();
    ground_truth_graph(patches, spec)
}

/// Number of edges per class.
pub fn class_counts(labels: &[RelationLabel]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for l in labels {
        counts[l.index()] += 1;
    }
    counts
}

/// Closed-form per-class edge counts of a `cols × rows` ground-truth graph.
pub fn expected_class_counts(cols: usize, rows: usize) -> [usize; NUM_CLASSES] {
    let n = cols * rows;
    let vertical = cols * rows.saturating_sub(1);
    let horizontal = rows * cols.saturating_sub(1);
    let none = n * n.saturating_sub(1) - 2 * (vertical + horizontal);
    [vertical, vertical, horizontal, horizontal, none]
}

/// Pastes patches back at their grid positions.
pub fn reassemble(patches: &[Patch], spec: &GridSpec) -> RgbImage {
    let mut img = RgbImage::filled(spec.image_w, spec.image_h, [0.0; 3]);
    for p in patches {
        let (row, col) = spec.position(p.node_id());
        img.paste(p, col * spec.patch, row * spec.patch);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Relation by enumerating the four neighbour offsets explicitly.
    fn brute_counts(cols: usize, rows: usize) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for s in 0..cols * rows {
            for t in 0..cols * rows {
                if s == t {
                    continue;
                }
                let (sr, sc) = (s / cols, s % cols);
                let (tr, tc) = (t / cols, t % cols);
                let class = if tc == sc && tr + 1 == sr {
                    0
                } else if tc == sc && sr + 1 == tr {
                    1
                } else if tr == sr && tc + 1 == sc {
                    2
                } else if tr == sr && sc + 1 == tc {
                    3
                } else {
                    4
                };
                counts[class] += 1;
            }
        }
        counts
    }

    #[test]
    fn grid_arithmetic() {
        let g = GridSpec::default();
        assert_eq!((g.cols(), g.rows(), g.patch_count()), (3, 5, 15));
        assert!(GridSpec::new(770, 1280, 256).is_err());
    }

    #[test]
    fn any_image_splits_into_fifteen_patches() {
        let img = RgbImage::from_fn(900, 1000, |x, y| [(x % 7) as f32 / 7.0, (y % 5) as f32 / 5.0, 0.5]);
        let patches = resize_and_split(&img, &GridSpec::default()).unwrap();
        assert_eq!(patches.len(), 15);
        assert!(patches.iter().all(|p| p.size() == 256));
        assert_eq!(patches.iter().map(|p| p.node_id()).collect::<Vec<_>>(), (0..15).collect::<Vec<_>>());
    }

    #[test]
    fn constant_image_gives_constant_patches() {
        let img = RgbImage::filled(768, 1280, [0.3, 0.5, 0.7]);
        for p in resize_and_split(&img, &GridSpec::default()).unwrap() {
            assert!(p.pixels().chunks(3).all(|px| px == [0.3, 0.5, 0.7]));
        }
    }

    #[test]
    fn empty_image_is_an_error() {
        let img = RgbImage::filled(0, 0, [0.0; 3]);
        assert!(resize_and_split(&img, &GridSpec::default()).is_err());
    }

    #[test]
    fn per_image_counts_match_closed_form_and_enumeration() {
        assert_eq!(expected_class_counts(3, 5), [12, 12, 10, 10, 166]);
        assert_eq!(brute_counts(2, 2), [2, 2, 2, 2, 4]);
        for cols in 1..=5 {
            for rows in 1..=5 {
                if cols * rows < 2 {
                    continue;
                }
                assert_eq!(expected_class_counts(cols, rows), brute_counts(cols, rows), "{cols}x{rows}");
                let spec = GridSpec::with_grid(cols, rows, 2).unwrap();
                let img = RgbImage::filled(spec.image_w, spec.image_h, [0.5; 3]);
                let g = ground_truth_graph(resize_and_split(&img, &spec).unwrap(), &spec).unwrap();
                assert_eq!(class_counts(&g.truth().unwrap()), brute_counts(cols, rows));
            }
        }
    }

    #[test]
    fn truth_is_reciprocal() {
        let spec = GridSpec::with_grid(3, 5, 4).unwrap();
        let img = RgbImage::filled(12, 20, [0.1; 3]);
        let g = ground_truth_graph(resize_and_split(&img, &spec).unwrap(), &spec).unwrap();
        let truth = g.truth().unwrap();
        for (i, e) in g.edges().enumerate() {
            let back = g.edge_index(e.target, e.source).unwrap();
            assert_eq!(truth[i], truth[back].reverse());
        }
    }

    #[test]
    fn wrong_patch_count_is_an_error() {
        let spec = GridSpec::with_grid(2, 2, 2).unwrap();
        let img = RgbImage::filled(4, 4, [0.1; 3]);
        let mut patches = resize_and_split(&img, &spec).unwrap();
        patches.pop();
        assert!(ground_truth_graph(patches, &spec).is_err());
    }

    #[test]
    fn reassembly_is_bit_exact() {
        let spec = GridSpec::with_grid(3, 2, 8).unwrap();
        let img = RgbImage::from_fn(24, 16, |x, y| [x as f32 / 24.0, y as f32 / 16.0, ((x * y) % 5) as f32 / 5.0]);
        let patches = resize_and_split(&img, &spec).unwrap();
        assert_eq!(reassemble(&patches, &spec), img);
    }
}
