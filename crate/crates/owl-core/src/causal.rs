//! Structural-causal-model bookkeeping for run manifests.
//!
//! The generation process is modeled with visual/text inputs and priors
//! acting on the output only through the two attention mediators:
//!
//! ```text
//! X_V -> A_V -> Y_T    P_V -> A_V -> Y_T
//! X_T -> A_T -> Y_T    P_T -> A_T -> Y_T
//! ```
//!
//! Priors are unobservable and cannot be intervened on; runs that rewrite
//! attention register do-interventions on `A_V` / `A_T`, and those records
//! are embedded in run manifests under the `scm` key. This module performs
//! no inference; it labels experiments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScmError {
    #[error("node {0:?} is unobservable or non-manipulable; interventions are only permitted on attention mediators")]
    NotManipulable(ScmNode),
}

pub type Result<T> = std::result::Result<T, ScmError>;

/// Nodes of the generation-process graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScmNode {
    #[serde(rename = "X_V")]
    VisualInput,
    #[serde(rename = "X_T")]
    TextInput,
    #[serde(rename = "P_V")]
    VisualPrior,
    #[serde(rename = "P_T")]
    TextPrior,
    #[serde(rename = "A_V")]
    VisualAttention,
    #[serde(rename = "A_T")]
    TextAttention,
    #[serde(rename = "Y_T")]
    Output,
}

impl ScmNode {
    /// Priors are latent; everything else is observable.
    pub fn observable(&self) -> bool {
        !matches!(self, Self::VisualPrior | Self::TextPrior)
    }

    /// Only the attention mediators can be intervened on.
    pub fn manipulable(&self) -> bool {
        matches!(self, Self::VisualAttention | Self::TextAttention)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmNodeSpec {
    pub node: ScmNode,
    pub observable: bool,
    pub manipulable: bool,
}

/// The fixed mediation graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmGraph {
    pub nodes: Vec<ScmNodeSpec>,
    pub edges: Vec<(ScmNode, ScmNode)>,
}

impl ScmGraph {
    pub fn standard() -> Self {
        use ScmNode::*;
        let nodes = [
            VisualInput,
            TextInput,
            VisualPrior,
            TextPrior,
            VisualAttention,
            TextAttention,
            Output,
        ]
        .into_iter()
        .map(|node| ScmNodeSpec {
            node,
            observable: node.observable(),
            manipulable: node.manipulable(),
        })
        .collect();
        let edges = vec![
            (VisualInput, VisualAttention),
            (VisualPrior, VisualAttention),
            (TextInput, TextAttention),
            (TextPrior, TextAttention),
            (VisualAttention, Output),
            (TextAttention, Output),
        ];
        Self { nodes, edges }
    }

    /// The graph is a DAG (checked by construction in tests).
    pub fn is_acyclic(&self) -> bool {
        // Kahn's algorithm over the tiny fixed node set.
        let nodes: Vec<ScmNode> = self.nodes.iter().map(|s| s.node).collect();
        let mut indegree = vec![0usize; nodes.len()];
        let idx = |n: ScmNode| nodes.iter().position(|&m| m == n).unwrap();
        for &(_, to) in &self.edges {
            indegree[idx(to)] += 1;
        }
        let mut queue: Vec<usize> = indegree
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| i)
            .collect();
        let mut seen = 0;
        while let Some(i) = queue.pop() {
            seen += 1;
            for &(from, to) in &self.edges {
                if idx(from) == i {
                    let t = idx(to);
                    indegree[t] -= 1;
                    if indegree[t] == 0 {
                        queue.push(t);
                    }
                }
            }
        }
        seen == nodes.len()
    }
}

/// One registered do-intervention, tagged with the decoding path that
/// applied it and a free-form descriptor (typically the coefficient
/// configuration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub node: ScmNode,
    pub path: String,
    pub descriptor: serde_json::Value,
}

/// Validates that `node` is a manipulable mediator and returns the record.
pub fn register_intervention(
    graph: &ScmGraph,
    node: ScmNode,
    path: &str,
    descriptor: serde_json::Value,
) -> Result<InterventionRecord> {
    let spec = graph
        .nodes
        .iter()
        .find(|s| s.node == node)
        .expect("node in graph");
    if !spec.manipulable {
        return Err(ScmError::NotManipulable(node));
    }
    Ok(InterventionRecord {
        node,
        path: path.to_string(),
        descriptor,
    })
}

/// Manifest fragment embedded in run JSON under the `scm` key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmManifest {
    pub graph: ScmGraph,
    pub interventions: Vec<InterventionRecord>,
}

impl ScmManifest {
    /// Baseline runs intervene on nothing.
    pub fn baseline() -> Self {
        Self {
            graph: ScmGraph::standard(),
            interventions: Vec::new(),
        }
    }

    /// Dual-path runs register both mediators per decoding path.
    pub fn dual_path(visual_descriptor: serde_json::Value, text_descriptor: serde_json::Value) -> Self {
        let graph = ScmGraph::standard();
        let interventions = vec![
            register_intervention(
                &graph,
                ScmNode::VisualAttention,
                "visual_favored",
                visual_descriptor.clone(),
            )
            .expect("mediator is manipulable"),
            register_intervention(
                &graph,
                ScmNode::TextAttention,
                "visual_favored",
                visual_descriptor,
            )
            .expect("mediator is manipulable"),
            register_intervention(
                &graph,
                ScmNode::VisualAttention,
                "text_favored",
                text_descriptor.clone(),
            )
            .expect("mediator is manipulable"),
            register_intervention(
                &graph,
                ScmNode::TextAttention,
                "text_favored",
                text_descriptor,
            )
            .expect("mediator is manipulable"),
        ];
        Self {
            graph,
            interventions,
        }
    }

    /// Intervention records for one path.
    pub fn records_for_path(&self, path: &str) -> Vec<&InterventionRecord> {
        self.interventions
            .iter()
            .filter(|r| r.path == path)
            .collect()
    }
}
