//! Connected components, grid layouts and mosaics of a labeled graph.
//!
//! Connectivity uses the directional edges only and ignores direction.
//! Each component is laid out by a depth-first search from its lowest node
//! id, which sits at `(0, 0)`. Edges are followed in both directions (the
//! reverse traversal applies the inverse step) in edge order; the first
//! position assigned to a node is final.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AssemblyGraph, Patch, RelationLabel};
use crate::raster::RgbImage;

/// Fill colour of mosaic cells that no node occupies.
pub const BACKGROUND: [f32; 3] = [0.0; 3];

fn labels(g: &AssemblyGraph) -> Vec<RelationLabel> {
    g.relations()
        .unwrap_or_else(|| vec![RelationLabel::None; g.edge_count()])
}

/// Per node (by position in `g.nodes()`), the neighbours reachable over
/// directional edges with the grid step towards them, in edge order.
fn adjacency(g: &AssemblyGraph) -> Vec<Vec<(usize, (i64, i64), usize)>> {
    let mut adj = vec![Vec::new(); g.node_count()];
    let pos = |id| g.node_position(id).expect("edges reference existing nodes");
    for (e, label) in labels(g).into_iter().enumerate() {
        if let Some((dx, dy)) = label.offset() {
            let edge = g.edge(e);
            let (s, t) = (pos(edge.source), pos(edge.target));
            adj[s].push((t, (dx, dy), e));
            adj[t].push((s, (-dx, -dy), e));
        }
    }
    adj
}

/// Node-id sets of the components, each sorted, ordered by smallest id.
/// Graphs without labels are all singletons.
pub fn connected_components(g: &AssemblyGraph) -> Vec<Vec<usize>> {
    let adj = adjacency(g);
    let mut seen = vec![false; g.node_count()];
    let mut order: Vec<usize> = (0..g.node_count()).collect();
    order.sort_by_key(|&i| g.nodes()[i].node_id());
    let mut components = Vec::new();
    for start in order {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut members = Vec::new();
        while let Some(u) = stack.pop() {
            members.push(g.nodes()[u].node_id());
            for &(v, _, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        members.sort_unstable();
        components.push(members);
    }
    components
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentLayout {
    /// Lowest node id of the component, placed at `(0, 0)`.
    pub origin: usize,
    /// `(node_id, (x, y))` in placement order; x grows right, y grows down.
    pub placements: Vec<(usize, (i64, i64))>,
}

impl ComponentLayout {
    pub fn position(&self, node: usize) -> Option<(i64, i64)> {
        self.placements.iter().find(|(n, _)| *n == node).map(|(_, p)| *p)
    }

    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    pub fn node_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.placements.iter().map(|(n, _)| *n).collect();
        ids.sort_unstable();
        ids
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (i64, i64, i64, i64) {
        self.placements.iter().fold(
            (i64::MAX, i64::MAX, i64::MIN, i64::MIN),
            |(a, b, c, d), (_, (x, y))| (a.min(*x), b.min(*y), c.max(*x), d.max(*y)),
        )
    }
}

/// Several candidate nodes for one slot of a component: nodes placed there
/// and nodes that some surviving edge would have placed there.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collision {
    pub component: usize,
    pub position: (i64, i64),
    /// Placed nodes first, in placement order; the first one is rendered.
    pub nodes: Vec<usize>,
}

/// An edge implying a different position for an already placed node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    pub component: usize,
    pub edge: usize,
    pub node: usize,
    pub placed: (i64, i64),
    pub implied: (i64, i64),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayoutResult {
    pub components: Vec<ComponentLayout>,
    pub collisions: Vec<Collision>,
    pub conflicts: Vec<Conflict>,
}

impl LayoutResult {
    /// `(component, position)` of a node.
    pub fn locate(&self, node: usize) -> Option<(usize, (i64, i64))> {
        self.components
            .iter()
            .enumerate()
            .find_map(|(c, comp)| comp.position(node).map(|p| (c, p)))
    }

    pub fn is_consistent(&self) -> bool {
        self.collisions.is_empty() && self.conflicts.is_empty()
    }
}

pub fn layout(g: &AssemblyGraph) -> LayoutResult {
    let adj = adjacency(g);
    let mut placed: Vec<Option<(i64, i64)>> = vec![None; g.node_count()];
    let id = |i: usize| g.nodes()[i].node_id();
    let mut result = LayoutResult::default();
    let mut reported = std::collections::HashSet::new();
    for (c, members) in connected_components(g).into_iter().enumerate() {
        let start = g.node_position(members[0]).expect("component members exist");
        placed[start] = Some((0, 0));
        let mut comp = ComponentLayout {
            origin: members[0],
            placements: vec![(members[0], (0, 0))],
        };
        // explicit recursion stack: (node, next adjacency index)
        let mut stack = vec![(start, 0usize)];
        while let Some(top) = stack.last_mut() {
            let (u, k) = *top;
            let Some(&(v, (dx, dy), e)) = adj[u].get(k) else {
                stack.pop();
                continue;
            };
            top.1 += 1;
            let here = placed[u].expect("nodes on the stack are placed");
            let implied = (here.0 + dx, here.1 + dy);
            match placed[v] {
                None => {
                    placed[v] = Some(implied);
                    comp.placements.push((id(v), implied));
                    stack.push((v, 0));
                }
                Some(p) if p != implied => {
                    // each disagreeing edge is seen from both ends; keep one
                    if reported.insert(e) {
                        result.conflicts.push(Conflict {
                            component: c,
                            edge: e,
                            node: id(v),
                            placed: p,
                            implied,
                        });
                    }
                }
                Some(_) => {}
            }
        }
        // candidates per slot: nodes placed there, then nodes that a
        // disagreeing edge would have put there
        let mut slots: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
        for (n, p) in &comp.placements {
            slots.entry((p.1, p.0)).or_default().push(*n);
        }
        for x in result.conflicts.iter().filter(|x| x.component == c) {
            let nodes = slots.entry((x.implied.1, x.implied.0)).or_default();
            if !nodes.contains(&x.node) {
                nodes.push(x.node);
            }
        }
        result.collisions.extend(
            slots
                .into_iter()
                .filter(|(_, nodes)| nodes.len() > 1)
                .map(|((y, x), nodes)| Collision {
                    component: c,
                    position: (x, y),
                    nodes,
                }),
        );
        result.components.push(comp);
    }
    result
}

/// One mosaic per component, translated so its bounding box starts at the
/// top-left pixel. Colliding slots show the first node placed there.
pub fn render(patches: &[Patch], layout: &LayoutResult) -> Result<Vec<RgbImage>> {
    let by_id: BTreeMap<usize, &Patch> = patches.iter().map(|p| (p.node_id(), p)).collect();
    let size = patches
        .first()
        .map(Patch::size)
        .ok_or_else(|| Error::Empty("no patches to render".into()))?;
    layout
        .components
        .iter()
        .map(|comp| {
            let (x0, y0, x1, y1) = comp.bounds();
            let (w, h) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
            let mut img = RgbImage::filled(w * size, h * size, BACKGROUND);
            let mut taken = vec![false; w * h];
            for (node, (x, y)) in &comp.placements {
                let (cx, cy) = ((x - x0) as usize, (y - y0) as usize);
                if std::mem::replace(&mut taken[cy * w + cx], true) {
                    continue;
                }
                let p = by_id
                    .get(node)
                    .ok_or_else(|| Error::invalid(format!("layout names node {node} without a patch")))?;
                if p.size() != size {
                    return Err(Error::shape(format!("patch {node} is {}px, expected {size}px", p.size())));
                }
                img.paste(p, cx * size, cy * size);
            }
            Ok(img)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{image_graph, GridSpec};
    use crate::graph::complete_graph;

    fn patches(n: usize, size: usize) -> Vec<Patch> {
        (0..n)
            .map(|i| Patch::new(i, size, vec![i as f32 / n as f32; size * size * 3], None).unwrap())
            .collect()
    }

    fn grid_graph(cols: usize, rows: usize) -> AssemblyGraph {
        let grid = GridSpec::with_grid(cols, rows, 4).unwrap();
        let img = crate::dataset::synth_image(3, grid.image_w, grid.image_h);
        image_graph(&img, &grid, None).unwrap()
    }

    fn with_labels(n: usize, edges: &[(usize, usize, RelationLabel)]) -> AssemblyGraph {
        let g = complete_graph(patches(n, 2)).unwrap();
        let mut labels = vec![RelationLabel::None; g.edge_count()];
        for &(s, t, l) in edges {
            labels[g.edge_index(s, t).unwrap()] = l;
        }
        g.with_predicted(labels).unwrap()
    }

    #[test]
    fn two_by_two_ground_truth() {
        let r = layout(&grid_graph(2, 2));
        assert_eq!(r.components.len(), 1);
        let c = &r.components[0];
        let expect = [(0, (0, 0)), (1, (1, 0)), (2, (0, 1)), (3, (1, 1))];
        for (n, p) in expect {
            assert_eq!(c.position(n), Some(p));
        }
        assert!(r.is_consistent());
    }

    #[test]
    fn ground_truth_grid_positions() {
        let (cols, rows) = (3, 5);
        let r = layout(&grid_graph(cols, rows));
        assert_eq!(r.components.len(), 1);
        for n in 0..cols * rows {
            let want = ((n % cols) as i64, (n / cols) as i64);
            assert_eq!(r.components[0].position(n), Some(want));
        }
        assert!(r.is_consistent());
    }

    #[test]
    fn components_ignore_none_and_direction() {
        let g = with_labels(5, &[(3, 1, RelationLabel::Left), (4, 0, RelationLabel::Down)]);
        assert_eq!(connected_components(&g), vec![vec![0, 4], vec![1, 3], vec![2]]);
        let all_none = with_labels(4, &[]);
        assert_eq!(connected_components(&all_none).len(), 4);
        let unlabeled = complete_graph(patches(3, 2)).unwrap();
        assert_eq!(connected_components(&unlabeled).len(), 3);
    }

    #[test]
    fn reverse_traversal_applies_inverse_step() {
        // 1 is left of 0 as seen from 1: 0 is at (1, 0) relative to 1
        let g = with_labels(2, &[(1, 0, RelationLabel::Left)]);
        let r = layout(&g);
        assert_eq!(r.components[0].position(1), Some((1, 0)));
    }

    #[test]
    fn double_candidate_above_is_one_collision() {
        let g = with_labels(13, &[(12, 9, RelationLabel::Up), (12, 6, RelationLabel::Up)]);
        let r = layout(&g);
        let c = r.locate(12).unwrap().0;
        let comp = &r.components[c];
        assert_eq!(comp.origin, 6);
        assert_eq!(comp.position(6), comp.position(9));
        assert_eq!(r.collisions.len(), 1);
        assert_eq!(r.collisions[0].nodes.len(), 2);
        let above = comp.position(12).map(|(x, y)| (x, y - 1));
        assert_eq!(Some(r.collisions[0].position), above);
    }

    #[test]
    fn disagreeing_edges_are_conflicts_and_do_not_move_nodes() {
        // 0 -R-> 1, 1 -D-> 2, and 0 -R-> 2 disagrees about node 2
        let g = with_labels(
            3,
            &[(0, 1, RelationLabel::Right), (1, 2, RelationLabel::Down), (0, 2, RelationLabel::Right)],
        );
        let r = layout(&g);
        assert_eq!(r.conflicts.len(), 1);
        let comp = &r.components[0];
        assert_eq!(comp.position(1), Some((1, 0)));
        assert_eq!(comp.position(2), Some((1, 1)));
        // found from node 2's side first: the edge would put 0 left of 2
        assert_eq!(r.conflicts[0].edge, g.edge_index(0, 2).unwrap());
        assert_eq!((r.conflicts[0].node, r.conflicts[0].implied), (0, (0, 1)));
        assert!(r.collisions.is_empty());
    }

    #[test]
    fn conflicting_candidate_for_an_occupied_slot_is_a_collision() {
        let g = grid_graph(3, 5);
        let mut labels = g.truth().unwrap();
        labels[g.edge_index(12, 6).unwrap()] = RelationLabel::Up;
        let r = layout(&g.with_predicted(labels).unwrap());
        assert_eq!(r.components[0].position(6), Some((0, 2)));
        assert_eq!(r.collisions.len(), 1);
        assert_eq!(r.collisions[0].position, (0, 3));
        assert_eq!(r.collisions[0].nodes, [9, 6]);
    }

    #[test]
    fn layout_is_deterministic() {
        let g = with_labels(6, &[(0, 1, RelationLabel::Right), (2, 1, RelationLabel::Up), (5, 2, RelationLabel::Left)]);
        assert_eq!(layout(&g), layout(&g));
    }

    #[test]
    fn render_rebuilds_the_image_and_singletons() {
        let grid = GridSpec::with_grid(3, 2, 4).unwrap();
        let img = crate::dataset::synth_image(9, grid.image_w, grid.image_h);
        let g = image_graph(&img, &grid, None).unwrap();
        let mosaics = render(g.nodes(), &layout(&g)).unwrap();
        assert_eq!(mosaics.len(), 1);
        let expected = crate::dataset::reassemble(g.nodes(), &grid);
        assert_eq!(mosaics[0], expected);

        let lone = with_labels(2, &[]);
        let m = render(lone.nodes(), &layout(&lone)).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].data(), lone.nodes()[1].pixels());
    }
}
