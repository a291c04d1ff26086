//! The example document under `docs/` stays in sync with the exporter.

use std::path::PathBuf;

use patchgraph::assembly::filter_edges;
use patchgraph::graph::{complete_graph, Patch, RelationLabel, NUM_CLASSES};
use patchgraph::graphio::{from_json_str, to_json_string, PatchStorage, FORMAT_VERSION};
use patchgraph::reconstruct::layout;

fn example_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/example-graph-v1.json")
}

fn row(label: RelationLabel, p: f32) -> [f32; NUM_CLASSES] {
    let mut r = [(1.0 - p) / 4.0; NUM_CLASSES];
    r[label.index()] = p;
    r
}

/// Two side-by-side patches of one page and a stray patch of another.
fn example_document() -> String {
    let patch = |id: usize, shade: f32, tag: &str| {
        let px: Vec<f32> = (0..2 * 2 * 3).map(|i| ((i % 3) as f32 * 40.0 + shade * 255.0).round() / 255.0).collect();
        Patch::new(id, 2, px, Some(tag.to_string())).unwrap()
    };
    let g = complete_graph(vec![patch(0, 0.2, "page"), patch(1, 0.4, "page"), patch(2, 0.6, "stray")]).unwrap();
    let probs = g
        .edges()
        .map(|e| match (e.source, e.target) {
            (0, 1) => row(RelationLabel::Right, 0.93),
            (1, 0) => row(RelationLabel::Left, 0.88),
            (1, 2) => row(RelationLabel::Down, 0.41),
            _ => row(RelationLabel::None, 0.97),
        })
        .collect();
    let g = g.with_probabilities(probs).unwrap();
    let l = layout(&filter_edges(&g, 0.8).unwrap());
    to_json_string(&g, Some(&l), &PatchStorage::Embedded, None).unwrap()
}

#[test]
fn example_document_is_current() {
    let text = example_document();
    if std::env::var_os("PATCHGRAPH_WRITE_EXAMPLE").is_some() {
        std::fs::write(example_path(), &text).unwrap();
    }
    let on_disk = std::fs::read_to_string(example_path()).unwrap();
    assert_eq!(on_disk, text);
    assert!(on_disk.contains(&format!("\"format_version\": {FORMAT_VERSION}")));
}

#[test]
fn example_document_round_trips() {
    let on_disk = std::fs::read_to_string(example_path()).unwrap();
    let (g, l) = from_json_str(&on_disk, None).unwrap();
    assert_eq!(g.node_count(), 3);
    assert_eq!(g.edge_count(), 6);
    let l = l.unwrap();
    assert_eq!(l.components.len(), 2);
    assert_eq!(to_json_string(&g, Some(&l), &PatchStorage::Embedded, None).unwrap(), on_disk);
}
