//! Assembly-graph data model: patches as nodes, ordered patch pairs as edges.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 5;
pub const DEFAULT_PATCH_SIZE: usize = 256;

/// Placement of the target patch relative to the source patch of an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationLabel {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    None = 4,
}

impl RelationLabel {
    pub const ALL: [RelationLabel; NUM_CLASSES] = [
        RelationLabel::Up,
        RelationLabel::Down,
        RelationLabel::Left,
        RelationLabel::Right,
        RelationLabel::None,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Label of the same relation seen from the target.
    pub fn reverse(self) -> Self {
        match self {
            RelationLabel::Up => RelationLabel::Down,
            RelationLabel::Down => RelationLabel::Up,
            RelationLabel::Left => RelationLabel::Right,
            RelationLabel::Right => RelationLabel::Left,
            RelationLabel::None => RelationLabel::None,
        }
    }

    pub fn is_directional(self) -> bool {
        self != RelationLabel::None
    }

    pub fn one_hot(self) -> [f32; NUM_CLASSES] {
        let mut v = [0.0; NUM_CLASSES];
        v[self.index()] = 1.0;
        v
    }

    pub fn glyph(self) -> char {
        match self {
            RelationLabel::Up => 'U',
            RelationLabel::Down => 'D',
            RelationLabel::Left => 'L',
            RelationLabel::Right => 'R',
            RelationLabel::None => '_',
        }
    }

    pub fn from_glyph(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.glyph() == c)
    }

    /// Grid step from source to target, screen convention (y grows downward).
    pub fn offset(self) -> Option<(i64, i64)> {
        match self {
            RelationLabel::Up => Some((0, -1)),
            RelationLabel::Down => Some((0, 1)),
            RelationLabel::Left => Some((-1, 0)),
            RelationLabel::Right => Some((1, 0)),
            RelationLabel::None => None,
        }
    }
}

impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.glyph())
    }
}

pub fn reverse_label(l: RelationLabel) -> RelationLabel {
    l.reverse()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32; NUM_CLASSES]) -> RelationLabel {
    let mut best = 0;
    for i in 1..NUM_CLASSES {
        if row[i] > row[best] {
            best = i;
        }
    }
    RelationLabel::ALL[best]
}

/// A square RGB patch, stored row-major with interleaved channels, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    node_id: usize,
    size: usize,
    pixels: Arc<[f32]>,
    source_tag: Option<String>,
}

impl Patch {
    pub fn new(node_id: usize, size: usize, pixels: Vec<f32>, source_tag: Option<String>) -> Result<Self> {
        if size == 0 || pixels.len() != size * size * 3 {
            return Err(Error::shape(format!(
                "patch {node_id}: {} values do not form a {size}x{size}x3 patch",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "patch {node_id}: pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Patch {
            node_id,
            size,
            pixels: pixels.into(),
            source_tag,
        })
    }

    pub fn node_id(&self) -> usize {
        self.node_id
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn source_tag(&self) -> Option<&str> {
        self.source_tag.as_deref()
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.size + x) * 3 + c]
    }

    pub fn with_id(&self, node_id: usize) -> Patch {
        Patch {
            node_id,
            ..self.clone()
        }
    }

    pub fn with_source_tag(&self, tag: Option<String>) -> Patch {
        Patch {
            source_tag: tag,
            ..self.clone()
        }
    }
}

/// What the rows of the edge feature matrix currently hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeFeatures {
    /// All-ones rows, before inference.
    Initial,
    /// One-hot ground truth.
    Truth,
    /// Softmax output of the pairwise model.
    Probabilities,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
}

/// Complete directed graph over patches.
///
/// Immutable once built; relabeling returns a new graph sharing the patch
/// pixel buffers.
#[derive(Debug, Clone)]
pub struct AssemblyGraph {
    nodes: Vec<Patch>,
    sources: Vec<usize>,
    targets: Vec<usize>,
    edge_labels: Vec<[f32; NUM_CLASSES]>,
    features: EdgeFeatures,
    predicted: Option<Vec<RelationLabel>>,
    node_index: HashMap<usize, usize>,
    edge_index: HashMap<(usize, usize), usize>,
}

impl PartialEq for AssemblyGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.sources == other.sources
            && self.targets == other.targets
            && self.edge_labels == other.edge_labels
            && self.features == other.features
            && self.predicted == other.predicted
    }
}

/// Complete digraph over `patches`, edges in lexicographic (source, target)
/// order, edge features initialized to all-ones rows.
pub fn complete_graph(patches: Vec<Patch>) -> Result<AssemblyGraph> {
    if patches.len() < 2 {
        return Err(Error::DegenerateGraph(patches.len()));
    }
    let mut nodes = patches;
    nodes.sort_by_key(|p| p.node_id);
    if let Some(w) = nodes.windows(2).find(|w| w[0].node_id == w[1].node_id) {
        return Err(Error::DuplicateNode(w[0].node_id));
    }
    let size = nodes[0].size;
    if let Some(p) = nodes.iter().find(|p| p.size != size) {
        return Err(Error::shape(format!(
            "patch {} is {}px, expected {size}px like the others",
            p.node_id, p.size
        )));
    }
    let n = nodes.len();
    let mut sources = Vec::with_capacity(n * (n - 1));
    let mut targets = Vec::with_capacity(n * (n - 1));
    for s in &nodes {
        for t in &nodes {
            if s.node_id != t.node_id {
                sources.push(s.node_id);
                targets.push(t.node_id);
            }
        }
    }
    let e = sources.len();
    AssemblyGraph::from_parts(
        nodes,
        sources,
        targets,
        vec![[1.0; NUM_CLASSES]; e],
        EdgeFeatures::Initial,
        None,
    )
}

impl AssemblyGraph {
    /// Builds a graph from raw parts, checking every structural invariant.
    /// Edge order is kept as given.
    pub fn from_parts(
        nodes: Vec<Patch>,
        sources: Vec<usize>,
        targets: Vec<usize>,
        edge_labels: Vec<[f32; NUM_CLASSES]>,
        features: EdgeFeatures,
        predicted: Option<Vec<RelationLabel>>,
    ) -> Result<Self> {
        let n = nodes.len();
        if n < 2 {
            return Err(Error::DegenerateGraph(n));
        }
        let mut node_index = HashMap::with_capacity(n);
        for (i, p) in nodes.iter().enumerate() {
            if node_index.insert(p.node_id, i).is_some() {
                return Err(Error::DuplicateNode(p.node_id));
            }
        }
        if let Some(p) = nodes.iter().find(|p| p.size != nodes[0].size) {
            return Err(Error::invariant(format!("patch {} has a different size", p.node_id)));
        }
        let e = sources.len();
        if targets.len() != e || edge_labels.len() != e {
            return Err(Error::invariant(format!(
                "connectivity rows ({e}, {}) and {} label rows disagree",
                targets.len(),
                edge_labels.len()
            )));
        }
        if e != n * (n - 1) {
            return Err(Error::invariant(format!(
                "complete graph on {n} nodes needs {} edges, got {e}",
                n * (n - 1)
            )));
        }
        let mut edge_index = HashMap::with_capacity(e);
        for (i, (&s, &t)) in sources.iter().zip(&targets).enumerate() {
            for id in [s, t] {
                if !node_index.contains_key(&id) {
                    return Err(Error::invariant(format!("edge {i} references unknown node {id}")));
                }
            }
            if s == t {
                return Err(Error::invariant(format!("self-loop on node {s}")));
            }
            if edge_index.insert((s, t), i).is_some() {
                return Err(Error::invariant(format!("duplicate edge ({s}, {t})")));
            }
        }
        for (i, row) in edge_labels.iter().enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invariant(format!("edge {i} has invalid features {row:?}")));
            }
            let ok = match features {
                EdgeFeatures::Initial => row.iter().all(|v| *v == 1.0),
                EdgeFeatures::Truth => {
                    row.iter().filter(|v| **v == 1.0).count() == 1
                        && row.iter().filter(|v| **v == 0.0).count() == NUM_CLASSES - 1
                }
                EdgeFeatures::Probabilities => (row.iter().sum::<f32>() - 1.0).abs() <= 1e-4,
            };
            if !ok {
                return Err(Error::invariant(format!(
                    "edge {i} features {row:?} are not valid {features:?} rows"
                )));
            }
        }
        if let Some(p) = &predicted {
            if p.len() != e {
                return Err(Error::invariant(format!("{} predictions for {e} edges", p.len())));
            }
        }
        Ok(AssemblyGraph {
            nodes,
            sources,
            targets,
            edge_labels,
            features,
            predicted,
            node_index,
            edge_index,
        })
    }

    pub fn nodes(&self) -> &[Patch] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Index of node `id` within `nodes()`.
    pub fn node_position(&self, id: usize) -> Option<usize> {
        self.node_index.get(&id).copied()
    }

    pub fn node(&self, id: usize) -> Option<&Patch> {
        self.node_index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn patch_size(&self) -> usize {
        self.nodes[0].size
    }

    pub fn edge_count(&self) -> usize {
        self.sources.len()
    }

    /// The 2×E connectivity matrix: source ids, then target ids.
    pub fn connectivity(&self) -> [&[usize]; 2] {
        [&self.sources, &self.targets]
    }

    pub fn edge(&self, e: usize) -> Edge {
        Edge {
            source: self.sources[e],
            target: self.targets[e],
        }
    }

    pub fn edges(&self) -> impl ExactSizeIterator<Item = Edge> + '_ {
        self.sources
            .iter()
            .zip(&self.targets)
            .map(|(&source, &target)| Edge { source, target })
    }

    pub fn edge_index(&self, source: usize, target: usize) -> Option<usize> {
        self.edge_index.get(&(source, target)).copied()
    }

    pub fn edge_labels(&self) -> &[[f32; NUM_CLASSES]] {
        &self.edge_labels
    }

    pub fn features(&self) -> EdgeFeatures {
        self.features
    }

    pub fn predicted(&self) -> Option<&[RelationLabel]> {
        self.predicted.as_deref()
    }

    /// Ground-truth labels, when the features are one-hot.
    pub fn truth(&self) -> Option<Vec<RelationLabel>> {
        (self.features == EdgeFeatures::Truth).then(|| self.edge_labels.iter().map(argmax).collect())
    }

    /// Predictions if present, otherwise ground truth.
    pub fn relations(&self) -> Option<Vec<RelationLabel>> {
        self.predicted.clone().or_else(|| self.truth())
    }

    /// Probability of the predicted class of edge `e`.
    pub fn confidence(&self, e: usize) -> Option<f32> {
        let label = self.predicted.as_ref()?[e];
        (self.features == EdgeFeatures::Probabilities).then(|| self.edge_labels[e][label.index()])
    }

    /// Replaces edge features with probability rows and predictions with
    /// their argmax. Nodes and connectivity are shared with `self`.
    pub fn with_probabilities(&self, probs: Vec<[f32; NUM_CLASSES]>) -> Result<Self> {
        let predicted = probs.iter().map(argmax).collect();
        self.relabeled(probs, EdgeFeatures::Probabilities, Some(predicted))
    }

    /// Replaces edge features with one-hot rows of `labels`.
    pub fn with_truth(&self, labels: &[RelationLabel]) -> Result<Self> {
        let rows = labels.iter().map(|l| l.one_hot()).collect();
        self.relabeled(rows, EdgeFeatures::Truth, None)
    }

    /// Keeps the features, replaces the predicted labels.
    pub fn with_predicted(&self, predicted: Vec<RelationLabel>) -> Result<Self> {
        self.relabeled(self.edge_labels.clone(), self.features, Some(predicted))
    }

    fn relabeled(
        &self,
        edge_labels: Vec<[f32; NUM_CLASSES]>,
        features: EdgeFeatures,
        predicted: Option<Vec<RelationLabel>>,
    ) -> Result<Self> {
        let e = self.edge_count();
        if edge_labels.len() != e || predicted.as_ref().is_some_and(|p| p.len() != e) {
            return Err(Error::shape(format!(
                "relabeling needs {e} rows, got {}",
                edge_labels.len()
            )));
        }
        Ok(AssemblyGraph {
            edge_labels,
            features,
            predicted,
            ..self.clone()
        })
    }
}
