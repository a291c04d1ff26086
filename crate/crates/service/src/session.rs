use patchgraph::assembly::filter_edges;
use patchgraph::graph::{AssemblyGraph, RelationLabel};
use patchgraph::graphio::{to_json_string, PatchStorage};
use patchgraph::reconstruct::{layout, LayoutResult};
use serde::{Deserialize, Serialize};

use crate::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Edit {
    DeleteEdge { source: usize, target: usize },
}

/// An inference result under curation. The view is always derived from the
/// immutable base graph, the threshold and the edit log.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub base: AssemblyGraph,
    pub tau: f32,
    pub log: Vec<Edit>,
}

pub fn check_tau(tau: f32) -> Result<f32, ApiError> {
    if (0.0..=1.0).contains(&tau) {
        Ok(tau)
    } else {
        Err(ApiError::bad_request(format!("tau {tau} outside [0, 1]")))
    }
}

impl Session {
    pub fn new(id: String, base: AssemblyGraph, tau: f32) -> Self {
        Session {
            id,
            base,
            tau,
            log: Vec::new(),
        }
    }

    fn deleted(&self) -> impl Iterator<Item = usize> + '_ {
        self.log.iter().filter_map(|e| match *e {
            Edit::DeleteEdge { source, target } => self.base.edge_index(source, target),
        })
    }

    /// Filtered graph with deleted edges relabeled None, at the session
    /// threshold unless `tau` overrides it.
    pub fn view(&self, tau: Option<f32>) -> Result<AssemblyGraph, ApiError> {
        let tau = check_tau(tau.unwrap_or(self.tau))?;
        let filtered = filter_edges(&self.base, tau)?;
        let mut labels = filtered.predicted().expect("filtering sets predictions").to_vec();
        for e in self.deleted() {
            labels[e] = RelationLabel::None;
        }
        Ok(filtered.with_predicted(labels)?)
    }

    pub fn view_with_layout(&self, tau: Option<f32>) -> Result<(AssemblyGraph, LayoutResult), ApiError> {
        let g = self.view(tau)?;
        let l = layout(&g);
        Ok((g, l))
    }

    /// The view as a graph document; patches are linked to the PNG endpoint.
    pub fn view_json(&self, tau: Option<f32>) -> Result<String, ApiError> {
        let (g, l) = self.view_with_layout(tau)?;
        let links = PatchStorage::Links(format!("/graphs/{}/patches/", self.id));
        Ok(to_json_string(&g, Some(&l), &links, None)?)
    }

    pub fn apply(&mut self, edit: Edit) -> Result<(), ApiError> {
        match edit {
            Edit::DeleteEdge { source, target } => {
                let e = self
                    .base
                    .edge_index(source, target)
                    .ok_or_else(|| ApiError::not_found(format!("no edge {source} -> {target}")))?;
                if self.deleted().any(|d| d == e) {
                    return Err(ApiError::conflict(format!("edge {source} -> {target} is already deleted")));
                }
                let view = self.view(None)?;
                if view.predicted().expect("views carry predictions")[e] == RelationLabel::None {
                    return Err(ApiError::conflict(format!(
                        "edge {source} -> {target} is not shown at tau {}",
                        self.tau
                    )));
                }
            }
        }
        self.log.push(edit);
        Ok(())
    }

    pub fn undo(&mut self) -> Result<Edit, ApiError> {
        self.log.pop().ok_or_else(|| ApiError::conflict("nothing to undo"))
    }

    pub fn set_tau(&mut self, tau: f32) -> Result<(), ApiError> {
        self.tau = check_tau(tau)?;
        Ok(())
    }
}
