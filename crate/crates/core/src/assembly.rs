//! Batched edge classification over a whole assembly graph.

use std::path::Path;

use crate::dataset::GridSpec;
use crate::error::{Error, Result};
use crate::graph::{AssemblyGraph, EdgeFeatures, RelationLabel, NUM_CLASSES};
use crate::pairnet::{JunctionGeometry, ModelParams, StripeSet};
use crate::tensor::Tensor;

/// Edges per forward pass during inference.
pub const DEFAULT_CHUNK: usize = 32;

/// Anything that assigns a probability row to every edge of a graph.
pub trait EdgeClassifier: Send + Sync {
    fn name(&self) -> &str;

    /// Patch size the classifier accepts, if it is fixed.
    fn patch_size(&self) -> Option<usize> {
        None
    }

    /// One probability row per edge, in graph edge order.
    fn probabilities(&self, g: &AssemblyGraph) -> Result<Vec<[f32; NUM_CLASSES]>>;
}

/// Per-edge source and target pixel stacks, `[E, size, size, 3]` each.
pub fn gather_pairs(g: &AssemblyGraph) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let size = g.patch_size();
    let len = size * size * 3;
    let e = g.edge_count();
    let (mut sources, mut targets) = (Vec::with_capacity(e * len), Vec::with_capacity(e * len));
    for edge in g.edges() {
        let lookup = |id: usize| {
            g.node(id)
                .ok_or_else(|| Error::invariant(format!("edge references missing node {id}")))
        };
        sources.extend_from_slice(lookup(edge.source)?.pixels());
        targets.extend_from_slice(lookup(edge.target)?.pixels());
    }
    let shape = [e, size, size, 3];
    Ok((Tensor::from_vec(&shape, sources)?, Tensor::from_vec(&shape, targets)?))
}

/// Replaces edge features with classifier probabilities and sets
/// `predicted` to their argmax. Nodes and connectivity are untouched.
pub fn infer(g: &AssemblyGraph, classifier: &dyn EdgeClassifier) -> Result<AssemblyGraph> {
    if let Some(size) = classifier.patch_size() {
        if size != g.patch_size() {
            return Err(Error::shape(format!(
                "{} expects {size}px patches, graph has {}px",
                classifier.name(),
                g.patch_size()
            )));
        }
    }
    g.with_probabilities(classifier.probabilities(g)?)
}

/// Relabels as None every edge whose predicted class has probability
/// below `tau`. Nothing is removed and probabilities are kept.
pub fn filter_edges(g: &AssemblyGraph, tau: f32) -> Result<AssemblyGraph> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("threshold {tau} outside [0, 1]")));
    }
    let predicted = g
        .predicted()
        .ok_or_else(|| Error::invalid("graph has no predictions to filter"))?;
    let filtered = predicted
        .iter()
        .enumerate()
        .map(|(e, &label)| {
            if label.is_directional() && g.edge_labels()[e][label.index()] >= tau {
                label
            } else {
                RelationLabel::None
            }
        })
        .collect();
    g.with_predicted(filtered)
}

/// The trained pairwise network, evaluated in chunks of edges.
#[derive(Debug, Clone)]
pub struct PairNet {
    params: ModelParams<f32>,
    chunk: usize,
}

impl PairNet {
    pub fn new(params: ModelParams<f32>) -> Self {
        PairNet {
            params,
            chunk: DEFAULT_CHUNK,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(ModelParams::load(path)?))
    }

    /// Edges per forward pass; results do not depend on it.
    pub fn with_chunk(mut self, chunk: usize) -> Self {
        self.chunk = chunk.max(1);
        self
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn geometry(&self) -> Result<JunctionGeometry> {
        self.params.geometry()
    }
}

/// Stripe sets of every node, indexed like `g.nodes()`.
pub(crate) fn node_stripes(g: &AssemblyGraph, geo: JunctionGeometry) -> Result<Vec<StripeSet>> {
    g.nodes().iter().map(|p| geo.extract(p)).collect()
}

/// Planar `[n, 3, H, W]` junction batch for the given edges.
pub(crate) fn junction_batch(
    g: &AssemblyGraph,
    stripes: &[StripeSet],
    edges: &[usize],
    buffer: Vec<f32>,
) -> Result<Tensor<f32>> {
    let geo = stripes
        .first()
        .ok_or_else(|| Error::shape("graph without nodes"))?
        .geometry();
    let (h, w) = geo.junction_dims();
    let len = 3 * h * w;
    let mut data = buffer;
    data.resize(edges.len() * len, 0.0);
    let position = |id: usize| g.node_position(id).expect("edges reference existing nodes");
    for (&e, out) in edges.iter().zip(data.chunks_mut(len)) {
        let edge = g.edge(e);
        stripes[position(edge.source)].write_junctions_planar(&stripes[position(edge.target)], out);
    }
    Tensor::from_vec(&[edges.len(), 3, h, w], data)
}

impl EdgeClassifier for PairNet {
    fn name(&self) -> &str {
        "pairnet"
    }

    fn patch_size(&self) -> Option<usize> {
        self.geometry().ok().map(|g| g.patch)
    }

    fn probabilities(&self, g: &AssemblyGraph) -> Result<Vec<[f32; NUM_CLASSES]>> {
        net_probabilities(&self.params, self.chunk, g)
    }
}

/// Eval-mode class probabilities of every edge, `chunk` edges per pass.
pub(crate) fn net_probabilities(
    params: &ModelParams<f32>,
    chunk: usize,
    g: &AssemblyGraph,
) -> Result<Vec<[f32; NUM_CLASSES]>> {
    let stripes = node_stripes(g, params.geometry()?)?;
    let all: Vec<usize> = (0..g.edge_count()).collect();
    let mut rows = Vec::with_capacity(all.len());
    let mut buffer = Vec::new();
    for edges in all.chunks(chunk.max(1)) {
        let x = junction_batch(g, &stripes, edges, buffer)?;
        let probs = params.predict(&x)?;
        rows.extend(probs.data().chunks(NUM_CLASSES).map(|r| {
            let mut row = [0.0; NUM_CLASSES];
            row.copy_from_slice(r);
            row
        }));
        buffer = x.into_data();
    }
    Ok(rows)
}

/// Perfect classifier for graphs cut from known grids.
///
/// An edge is labeled by the grid relation of its endpoints when both come
/// from the same image (equal source tags); node ids are taken modulo the
/// grid's patch count, which is how multi-image graphs number their nodes.
#[derive(Debug, Clone, Copy)]
pub struct TruthOracle {
    pub grid: GridSpec,
}

impl TruthOracle {
    pub fn relation(&self, g: &AssemblyGraph, e: usize) -> RelationLabel {
        let edge = g.edge(e);
        let (s, t) = (g.node(edge.source), g.node(edge.target));
        let same_image = matches!((s, t), (Some(a), Some(b)) if a.source_tag() == b.source_tag());
        let n = self.grid.patch_count();
        if same_image && edge.source / n == edge.target / n {
            self.grid.relation(edge.source % n, edge.target % n)
        } else {
            RelationLabel::None
        }
    }
}

impl EdgeClassifier for TruthOracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn patch_size(&self) -> Option<usize> {
        Some(self.grid.patch)
    }

    fn probabilities(&self, g: &AssemblyGraph) -> Result<Vec<[f32; NUM_CLASSES]>> {
        if g.features() == EdgeFeatures::Truth {
            return Ok(g.edge_labels().to_vec());
        }
        Ok((0..g.edge_count()).map(|e| self.relation(g, e).one_hot()).collect())
    }
}

/// Training-free baseline: scores each direction by how smoothly the two
/// facing border lines continue, and None by a fixed margin.
#[derive(Debug, Clone, Copy)]
pub struct SeamHeuristic {
    /// Mean absolute colour step at or above which None wins.
    pub none_level: f32,
    /// Softmax temperature on the colour steps.
    pub temperature: f32,
}

impl Default for SeamHeuristic {
    fn default() -> Self {
        SeamHeuristic {
            none_level: 0.04,
            temperature: 0.01,
        }
    }
}

impl SeamHeuristic {
    /// Mean absolute difference across each of the four candidate seams,
    /// in class order (Up, Down, Left, Right).
    pub fn seam_steps(source: &crate::graph::Patch, target: &crate::graph::Patch) -> [f32; 4] {
        let n = source.size();
        let mean_abs = |a: &dyn Fn(usize, usize) -> f32, b: &dyn Fn(usize, usize) -> f32| {
            let mut total = 0.0;
            for i in 0..n {
                for c in 0..3 {
                    total += (a(i, c) - b(i, c)).abs();
                }
            }
            total / (3 * n) as f32
        };
        let last = n - 1;
        [
            // target above: target's bottom row against source's top row
            mean_abs(&|i, c| target.pixel(last, i, c), &|i, c| source.pixel(0, i, c)),
            mean_abs(&|i, c| source.pixel(last, i, c), &|i, c| target.pixel(0, i, c)),
            mean_abs(&|i, c| target.pixel(i, last, c), &|i, c| source.pixel(i, 0, c)),
            mean_abs(&|i, c| source.pixel(i, last, c), &|i, c| target.pixel(i, 0, c)),
        ]
    }
}

impl EdgeClassifier for SeamHeuristic {
    fn name(&self) -> &str {
        "seam"
    }

    fn probabilities(&self, g: &AssemblyGraph) -> Result<Vec<[f32; NUM_CLASSES]>> {
        let t = self.temperature.max(f32::MIN_POSITIVE);
        Ok(g.edges()
            .map(|edge| {
                let (s, tg) = (g.node(edge.source).unwrap(), g.node(edge.target).unwrap());
                let steps = Self::seam_steps(s, tg);
                let mut logits = [0.0f32; NUM_CLASSES];
                for (l, d) in logits.iter_mut().zip(steps) {
                    *l = -d / t;
                }
                logits[RelationLabel::None.index()] = -self.none_level / t;
                let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let exp = logits.map(|v| (v - max).exp());
                let total: f32 = exp.iter().sum();
                exp.map(|v| v / total)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ground_truth_graph, resize_and_split};
    use crate::graph::{complete_graph, Patch};
    use crate::pairnet::NetConfig;
    use crate::raster::RgbImage;

    fn ramp_patches(n: usize, size: usize) -> Vec<Patch> {
        (0..n)
            .map(|id| {
                let px = (0..size * size * 3)
                    .map(|i| ((i * (id + 3) + id * 17) % 97) as f32 / 96.0)
                    .collect();
                Patch::new(id, size, px, None).unwrap()
            })
            .collect()
    }

    fn tiny_net(seed: u64) -> PairNet {
        let geo = JunctionGeometry::new(16, 4).unwrap();
        let mut cfg = NetConfig::for_geometry(geo);
        cfg.dense = vec![16, 8, NUM_CLASSES];
        PairNet::new(ModelParams::new(cfg, seed).unwrap())
    }

    #[test]
    fn gather_pairs_follows_edge_order() {
        let g = complete_graph(ramp_patches(3, 4)).unwrap();
        let (s, t) = gather_pairs(&g).unwrap();
        assert_eq!(s.shape(), [6, 4, 4, 3]);
        assert_eq!(t.shape(), [6, 4, 4, 3]);
        let first = g.edge(0);
        assert_eq!(&s.data()[..48], g.node(first.source).unwrap().pixels());
        assert_eq!(&t.data()[..48], g.node(first.target).unwrap().pixels());
        let last = g.edge(5);
        assert_eq!(&t.data()[5 * 48..], g.node(last.target).unwrap().pixels());
    }

    #[test]
    fn inference_rows_are_distributions_and_chunking_is_invisible() {
        let g = complete_graph(ramp_patches(5, 16)).unwrap();
        let net = tiny_net(1);
        let whole = infer(&g, &net.clone().with_chunk(1000)).unwrap();
        let chunked = infer(&g, &net.clone().with_chunk(3)).unwrap();
        assert_eq!(whole.edge_labels(), chunked.edge_labels());
        assert_eq!(whole.predicted(), chunked.predicted());
        assert_eq!(whole.edge_count(), 20);
        for row in whole.edge_labels() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-4);
        }
        assert_eq!(whole.nodes(), g.nodes());
        assert_eq!(whole.connectivity(), g.connectivity());
    }

    #[test]
    fn wrong_patch_size_is_rejected() {
        let g = complete_graph(ramp_patches(2, 8)).unwrap();
        assert!(matches!(infer(&g, &tiny_net(0)), Err(Error::Shape(_))));
    }

    fn with_probs(rows: Vec<[f32; NUM_CLASSES]>) -> AssemblyGraph {
        let g = complete_graph(ramp_patches(2, 4)).unwrap();
        g.with_probabilities(rows).unwrap()
    }

    #[test]
    fn threshold_semantics() {
        let g = with_probs(vec![[0.83, 0.05, 0.04, 0.04, 0.04], [0.1, 0.1, 0.1, 0.1, 0.6]]);
        let kept = filter_edges(&g, 0.8).unwrap();
        assert_eq!(kept.predicted().unwrap(), [RelationLabel::Up, RelationLabel::None]);
        let dropped = filter_edges(&g, 0.85).unwrap();
        assert_eq!(dropped.predicted().unwrap(), [RelationLabel::None, RelationLabel::None]);
        assert_eq!(dropped.edge_labels(), g.edge_labels());
        assert_eq!(filter_edges(&g, 0.0).unwrap().predicted(), g.predicted());
        assert!(filter_edges(&g, 1.0).unwrap().predicted().unwrap().iter().all(|l| *l == RelationLabel::None));
        assert!(filter_edges(&g, 1.5).is_err());
        assert!(filter_edges(&g, -0.1).is_err());
    }

    #[test]
    fn exact_one_survives_tau_one() {
        let g = with_probs(vec![[0.0, 0.0, 1.0, 0.0, 0.0], [0.0, 0.5, 0.0, 0.0, 0.5]]);
        let f = filter_edges(&g, 1.0).unwrap();
        assert_eq!(f.predicted().unwrap(), [RelationLabel::Left, RelationLabel::None]);
    }

    #[test]
    fn filtering_needs_predictions() {
        let g = complete_graph(ramp_patches(2, 4)).unwrap();
        assert!(filter_edges(&g, 0.5).is_err());
    }

    fn grid_graph() -> (AssemblyGraph, GridSpec) {
        let spec = GridSpec::with_grid(3, 2, 16).unwrap();
        let img = crate::dataset::synth_image(4, 48, 32);
        let g = ground_truth_graph(resize_and_split(&img, &spec).unwrap(), &spec).unwrap();
        (g, spec)
    }

    #[test]
    fn oracle_reproduces_truth() {
        let (g, spec) = grid_graph();
        let oracle = TruthOracle { grid: spec };
        let unlabeled = complete_graph(g.nodes().to_vec()).unwrap();
        let out = infer(&unlabeled, &oracle).unwrap();
        assert_eq!(out.predicted().unwrap(), g.truth().unwrap().as_slice());
    }

    #[test]
    fn seam_heuristic_prefers_true_neighbours_on_smooth_images() {
        let img = RgbImage::from_fn(48, 32, |x, y| [x as f32 / 48.0, y as f32 / 32.0, 0.5]);
        let spec = GridSpec::with_grid(3, 2, 16).unwrap();
        let g = ground_truth_graph(resize_and_split(&img, &spec).unwrap(), &spec).unwrap();
        let out = infer(&g, &SeamHeuristic::default()).unwrap();
        let truth = g.truth().unwrap();
        for (e, t) in truth.iter().enumerate() {
            if t.is_directional() {
                assert_eq!(out.predicted().unwrap()[e], *t, "edge {:?}", g.edge(e));
            }
        }
    }
}
