//! JSON documents for assembly graphs and their layouts.
//!
//! Keys are sorted and every probability is rounded to 6 significant digits,
//! so exporting the same graph always yields the same bytes. Patches are
//! either embedded as base64 PNG or stored as PNG files next to the
//! document. The schema is described in `docs/graph-format.md`.

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AssemblyGraph, EdgeFeatures, Patch, RelationLabel, NUM_CLASSES};
use crate::raster::{patch_image, RgbImage};
use crate::reconstruct::LayoutResult;

pub const FORMAT_VERSION: u32 = 1;

/// Where patch pixels go on export.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum PatchStorage {
    #[default]
    Embedded,
    /// PNG files named `<node id>.png` in this directory, referenced
    /// relative to the document when possible.
    Files(PathBuf),
    /// References `<prefix><node id>.png` without writing anything; for
    /// documents whose patches are served elsewhere.
    Links(String),
}

// Field order is alphabetical; the document is also routed through a
// sorted map before printing.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    edges: Vec<EdgeRecord>,
    features: EdgeFeatures,
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layout: Option<LayoutResult>,
    nodes: Vec<NodeRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    predicted: Option<String>,
    probs: [f64; NUM_CLASSES],
    source: usize,
    target: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    patch_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    patch_png: Option<String>,
    size: usize,
    source_tag: Option<String>,
}

/// Rounds to 6 significant digits.
pub fn round_sig6(v: f32) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v as f64;
    }
    format!("{:.5e}", v as f64).parse().expect("formatted float parses")
}

fn encode_patch(p: &Patch) -> Result<Vec<u8>> {
    patch_image(p).encode_png()
}

fn decode_patch(id: usize, size: usize, tag: Option<String>, img: RgbImage) -> Result<Patch> {
    if img.width() != size || img.height() != size {
        return Err(Error::invariant(format!(
            "patch {id} image is {}x{}, expected {size}x{size}",
            img.width(),
            img.height()
        )));
    }
    Patch::new(id, size, img.data().to_vec(), tag)
}

/// Serializes `g` (and optionally its layout). With `PatchStorage::Files`
/// the patch PNGs are written as a side effect; `doc_dir` is the directory
/// the document will live in, used to make file references relative.
pub fn to_json_string(
    g: &AssemblyGraph,
    layout: Option<&LayoutResult>,
    storage: &PatchStorage,
    doc_dir: Option<&Path>,
) -> Result<String> {
    let mut nodes = Vec::with_capacity(g.node_count());
    for p in g.nodes() {
        let (patch_png, patch_file) = match storage {
            PatchStorage::Embedded => (Some(B64.encode(encode_patch(p)?)), None),
            PatchStorage::Files(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let file = dir.join(format!("{}.png", p.node_id()));
                patch_image(p).save_png(&file)?;
                let reference = doc_dir
                    .and_then(|d| file.strip_prefix(d).ok())
                    .unwrap_or(&file)
                    .to_string_lossy()
                    .replace('\\', "/");
                (None, Some(reference))
            }
            PatchStorage::Links(prefix) => (None, Some(format!("{prefix}{}.png", p.node_id()))),
        };
        nodes.push(NodeRecord {
            id: p.node_id(),
            patch_file,
            patch_png,
            size: p.size(),
            source_tag: p.source_tag().map(str::to_owned),
        });
    }
    let predicted = g.predicted();
    let edges = g
        .edges()
        .enumerate()
        .map(|(e, edge)| EdgeRecord {
            predicted: predicted.map(|p| p[e].glyph().to_string()),
            probs: g.edge_labels()[e].map(round_sig6),
            source: edge.source,
            target: edge.target,
        })
        .collect();
    let doc = Document {
        edges,
        features: g.features(),
        format_version: FORMAT_VERSION,
        layout: layout.cloned(),
        nodes,
    };
    let value = serde_json::to_value(&doc).map_err(|e| Error::Malformed(e.to_string()))?;
    let mut text = serde_json::to_string_pretty(&sort_keys(value)).map_err(|e| Error::Malformed(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

fn sort_keys(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut entries: Vec<_> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Parses a document; relative patch files resolve against `base_dir`.
pub fn from_json_str(text: &str, base_dir: Option<&Path>) -> Result<(AssemblyGraph, Option<LayoutResult>)> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Malformed("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion {
            found: version.min(u32::MAX as u64) as u32,
            expected: FORMAT_VERSION,
        });
    }
    let doc: Document = serde_json::from_value(raw).map_err(|e| Error::Malformed(e.to_string()))?;

    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for n in doc.nodes {
        let img = match (n.patch_png, n.patch_file) {
            (Some(b64), None) => {
                let bytes = B64
                    .decode(b64.as_bytes())
                    .map_err(|e| Error::Malformed(format!("node {}: {e}", n.id)))?;
                RgbImage::decode_png(&bytes)?
            }
            (None, Some(file)) => {
                let path = PathBuf::from(&file);
                let path = match base_dir {
                    Some(d) if path.is_relative() => d.join(path),
                    _ => path,
                };
                RgbImage::load_png(&path)?
            }
            _ => {
                return Err(Error::Malformed(format!(
                    "node {} needs exactly one of patch_png and patch_file",
                    n.id
                )))
            }
        };
        nodes.push(decode_patch(n.id, n.size, n.source_tag, img)?);
    }

    let e = doc.edges.len();
    let (mut sources, mut targets, mut rows) = (Vec::with_capacity(e), Vec::with_capacity(e), Vec::with_capacity(e));
    let mut predicted = Vec::with_capacity(e);
    let mut any_predicted = None;
    for (i, edge) in doc.edges.into_iter().enumerate() {
        sources.push(edge.source);
        targets.push(edge.target);
        rows.push(edge.probs.map(|v| v as f32));
        let label = match edge.predicted.as_deref() {
            None => None,
            Some(s) => {
                let mut chars = s.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => Some(
                        RelationLabel::from_glyph(c)
                            .ok_or_else(|| Error::Malformed(format!("edge {i}: unknown label {s:?}")))?,
                    ),
                    _ => return Err(Error::Malformed(format!("edge {i}: unknown label {s:?}"))),
                }
            }
        };
        match (any_predicted, label.is_some()) {
            (None, has) => any_predicted = Some(has),
            (Some(prev), has) if prev != has => {
                return Err(Error::Malformed("predictions given for only some edges".into()))
            }
            _ => {}
        }
        predicted.extend(label);
    }
    let predicted = any_predicted.unwrap_or(false).then_some(predicted);
    let g = AssemblyGraph::from_parts(nodes, sources, targets, rows, doc.features, predicted)?;
    if let Some(layout) = &doc.layout {
        check_layout(&g, layout)?;
    }
    Ok((g, doc.layout))
}

fn check_layout(g: &AssemblyGraph, layout: &LayoutResult) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for (n, _) in layout.components.iter().flat_map(|c| &c.placements) {
        if g.node(*n).is_none() {
            return Err(Error::invariant(format!("layout places unknown node {n}")));
        }
        if !seen.insert(*n) {
            return Err(Error::invariant(format!("layout places node {n} twice")));
        }
    }
    Ok(())
}

pub fn export(g: &AssemblyGraph, layout: Option<&LayoutResult>, storage: &PatchStorage, path: &Path) -> Result<()> {
    let text = to_json_string(g, layout, storage, path.parent())?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn import(path: &Path) -> Result<(AssemblyGraph, Option<LayoutResult>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json_str(&text, path.parent())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{image_graph, synth_image, GridSpec};
    use crate::reconstruct::layout;

    fn predicted_graph() -> AssemblyGraph {
        let grid = GridSpec::with_grid(3, 5, 8).unwrap();
        let g = image_graph(&synth_image(4, 24, 40), &grid, Some("page")).unwrap();
        let rows = (0..g.edge_count())
            .map(|e| {
                let mut r = [0.1 + (e % 7) as f32 * 0.013, 0.2, 0.05, 0.3, 0.0];
                r[4] = 1.0 - r[..4].iter().sum::<f32>();
                r
            })
            .collect();
        g.with_probabilities(rows).unwrap()
    }

    #[test]
    fn round_trip_keeps_predictions_and_probabilities() {
        let g = predicted_graph();
        let lay = layout(&g);
        let text = to_json_string(&g, Some(&lay), &PatchStorage::Embedded, None).unwrap();
        let (back, lay_back) = from_json_str(&text, None).unwrap();
        assert_eq!(back.predicted(), g.predicted());
        assert_eq!(back.nodes(), g.nodes());
        assert_eq!(lay_back.as_ref(), Some(&lay));
        for (a, b) in back.edge_labels().iter().zip(g.edge_labels()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 5e-6 * y.abs().max(1e-30));
            }
        }
        // a second trip is byte-identical
        assert_eq!(to_json_string(&back, lay_back.as_ref(), &PatchStorage::Embedded, None).unwrap(), text);
    }

    #[test]
    fn fifteen_nodes_give_210_edge_records_with_legend_glyphs() {
        let g = predicted_graph();
        let text = to_json_string(&g, None, &PatchStorage::Embedded, None).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let edges = v["edges"].as_array().unwrap();
        assert_eq!(edges.len(), 210);
        assert!(edges.iter().all(|e| "UDLR_".contains(e["predicted"].as_str().unwrap())));
        assert!(v.get("layout").is_none());
    }

    #[test]
    fn keys_are_sorted_and_output_deterministic() {
        let g = predicted_graph();
        let a = to_json_string(&g, Some(&layout(&g)), &PatchStorage::Embedded, None).unwrap();
        let b = to_json_string(&g, Some(&layout(&g)), &PatchStorage::Embedded, None).unwrap();
        assert_eq!(a, b);
        let top: Vec<&str> = a
            .lines()
            .filter(|l| l.starts_with("  \"") && !l.starts_with("   "))
            .map(|l| l.trim().split('"').nth(1).unwrap())
            .collect();
        assert_eq!(top, ["edges", "features", "format_version", "layout", "nodes"]);
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(round_sig6(0.123456789), 0.123457);
        assert_eq!(round_sig6(1.0), 1.0);
        assert_eq!(round_sig6(2.5e-7), 2.5e-7);
    }

    #[test]
    fn truth_graphs_round_trip_without_predictions() {
        let grid = GridSpec::with_grid(2, 2, 4).unwrap();
        let g = image_graph(&synth_image(1, 8, 8), &grid, None).unwrap();
        let text = to_json_string(&g, None, &PatchStorage::Embedded, None).unwrap();
        let (back, _) = from_json_str(&text, None).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn external_patch_files() {
        let dir = tempfile::tempdir().unwrap();
        let g = predicted_graph();
        let path = dir.path().join("graph.json");
        export(&g, None, &PatchStorage::Files(dir.path().join("patches")), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"patch_file\": \"patches/0.png\""));
        let (back, _) = import(&path).unwrap();
        assert_eq!(back.nodes(), g.nodes());
    }

    fn mutate(f: impl FnOnce(&mut serde_json::Value)) -> Result<(AssemblyGraph, Option<LayoutResult>)> {
        let g = predicted_graph();
        let mut v: serde_json::Value =
            serde_json::from_str(&to_json_string(&g, None, &PatchStorage::Embedded, None).unwrap()).unwrap();
        f(&mut v);
        from_json_str(&v.to_string(), None)
    }

    #[test]
    fn distinct_error_kinds() {
        assert!(matches!(from_json_str("{ not json", None), Err(Error::Malformed(_))));
        assert!(matches!(
            mutate(|v| v["format_version"] = 99.into()),
            Err(Error::UnsupportedVersion { found: 99, .. })
        ));
        assert!(matches!(
            mutate(|v| {
                let first = v["edges"][0].clone();
                v["edges"][1]["source"] = first["source"].clone();
                v["edges"][1]["target"] = first["target"].clone();
            }),
            Err(Error::InvariantViolation(_))
        ));
        assert!(matches!(
            mutate(|v| v["edges"][3]["probs"] = serde_json::json!([0.1, 0.1, 0.1, 0.1, 0.1])),
            Err(Error::InvariantViolation(_))
        ));
        assert!(matches!(
            mutate(|v| v["edges"][0]["predicted"] = "X".into()),
            Err(Error::Malformed(_))
        ));
        assert!(matches!(
            mutate(|v| v["nodes"][0].as_object_mut().unwrap().remove("patch_png").map(|_| ()).unwrap()),
            Err(Error::Malformed(_))
        ));
    }

    #[test]
    fn linked_patches_are_references_only() {
        let g = predicted_graph();
        let text = to_json_string(&g, None, &PatchStorage::Links("/graphs/g1/patches/".into()), None).unwrap();
        assert!(text.contains("\"patch_file\": \"/graphs/g1/patches/14.png\""));
        assert!(!text.contains("patch_png"));
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let g = predicted_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("graph.json");
        assert!(matches!(export(&g, None, &PatchStorage::Embedded, &path), Err(Error::Io { .. })));
    }
}
