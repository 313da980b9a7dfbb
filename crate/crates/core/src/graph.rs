//! Object graphs `G(V, F, E)` for a single robot observation.
//!
//! Nodes are kept in canonical order (lexicographic by position, then id)
//! so that downstream position embeddings see a well-defined index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delaunay::{delaunay_edges_keyed, Edge};
use crate::tensor::Tensor;

/// Version tag written into graph JSON fixtures.
pub const GRAPH_JSON_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate node id {0}")]
    DuplicateId(u32),
    #[error("node {id}: non-finite position")]
    NonFinitePosition { id: u32 },
    #[error("node {id}: feature width {got}, expected {expected}")]
    FeatureWidth { id: u32, got: usize, expected: usize },
    #[error("graph json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported graph json version {0}")]
    Version(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub id: u32,
    /// Camera frame, metres; `y` is up.
    #[serde(rename = "pos")]
    pub position: [f64; 3],
    #[serde(rename = "feat")]
    pub feature: Vec<f64>,
    #[serde(rename = "class", default, skip_serializing_if = "Option::is_none")]
    pub class_tag: Option<u8>,
}

impl ObjectNode {
    pub fn new(id: u32, position: [f64; 3], feature: Vec<f64>) -> Self {
        Self {
            id,
            position,
            feature,
            class_tag: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    nodes: Vec<ObjectNode>,
    edges: Vec<Edge>,
    adjacency: Tensor,
}

/// Permutation `perm` such that `nodes[perm[k]]` is the k-th node in
/// canonical order: lexicographic `(x, y, z)`, ties broken by id.
pub fn canonical_order(nodes: &[ObjectNode]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..nodes.len()).collect();
    perm.sort_by(|&a, &b| {
        let (pa, pb) = (&nodes[a].position, &nodes[b].position);
        pa[0]
            .total_cmp(&pb[0])
            .then(pa[1].total_cmp(&pb[1]))
            .then(pa[2].total_cmp(&pb[2]))
            .then(nodes[a].id.cmp(&nodes[b].id))
    });
    perm
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn adjacency_for(nodes: &[ObjectNode], edges: &[Edge]) -> Tensor {
    let n = nodes.len();
    let mut a = vec![0.0; n * n];
    for &(i, j) in edges {
        let d = distance(&nodes[i].position, &nodes[j].position);
        a[i * n + j] = d;
        a[j * n + i] = d;
    }
    Tensor::new(vec![n, n], a).expect("n×n")
}

/// Canonically orders `nodes`, triangulates and fills the distance adjacency.
pub fn build_graph(nodes: Vec<ObjectNode>) -> Result<SceneGraph, GraphError> {
    let mut seen = std::collections::HashSet::new();
    let width = nodes.first().map_or(0, |n| n.feature.len());
    for node in &nodes {
        if node.feature.len() != width {
            return Err(GraphError::FeatureWidth {
                id: node.id,
                got: node.feature.len(),
                expected: width,
            });
        }
        if !seen.insert(node.id) {
            return Err(GraphError::DuplicateId(node.id));
        }
        if node.position.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::NonFinitePosition { id: node.id });
        }
    }
    let perm = canonical_order(&nodes);
    let mut slots: Vec<Option<ObjectNode>> = nodes.into_iter().map(Some).collect();
    let ordered: Vec<ObjectNode> = perm.iter().map(|&k| slots[k].take().expect("perm")).collect();
    Ok(SceneGraph::from_ordered(ordered))
}

impl SceneGraph {
    /// Builds edges and adjacency for nodes already in the desired order.
    pub(crate) fn from_ordered(nodes: Vec<ObjectNode>) -> Self {
        let positions: Vec<[f64; 3]> = nodes.iter().map(|n| n.position).collect();
        let ids: Vec<u32> = nodes.iter().map(|n| n.id).collect();
        let edges: Vec<Edge> = delaunay_edges_keyed(&positions, &ids).into_iter().collect();
        let adjacency = adjacency_for(&nodes, &edges);
        Self {
            nodes,
            edges,
            adjacency,
        }
    }

    pub fn empty() -> Self {
        Self {
            nodes: Vec::new(),
            edges: Vec::new(),
            adjacency: Tensor::zeros(&[0, 0]),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[ObjectNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn feature_width(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.feature.len())
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.nodes.iter().map(|n| n.position).collect()
    }

    /// Node features as an `n × d_f` matrix.
    pub fn features(&self) -> Tensor {
        let d = self.feature_width();
        let data = self.nodes.iter().flat_map(|n| n.feature.iter().copied()).collect();
        Tensor::new(vec![self.len(), d], data).expect("uniform feature width")
    }

    /// Neighbour lists from the edge set (self not included).
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for &(i, j) in &self.edges {
            out[i].push(j);
            out[j].push(i);
        }
        out.iter_mut().for_each(|v| v.sort_unstable());
        out
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`, keeping
    /// the edge structure. Bypasses canonical ordering.
    pub fn permuted(&self, perm: &[usize]) -> SceneGraph {
        let n = self.len();
        assert_eq!(perm.len(), n, "permutation length");
        let mut inverse = vec![0; n];
        for (k, &old) in perm.iter().enumerate() {
            inverse[old] = k;
        }
        let nodes: Vec<ObjectNode> = perm.iter().map(|&i| self.nodes[i].clone()).collect();
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|&(a, b)| {
                let (x, y) = (inverse[a], inverse[b]);
                (x.min(y), x.max(y))
            })
            .collect();
        edges.sort_unstable();
        let adjacency = adjacency_for(&nodes, &edges);
        SceneGraph {
            nodes,
            edges,
            adjacency,
        }
    }

    /// Replaces node features, keeping geometry.
    pub fn with_features(&self, features: &[Vec<f64>]) -> SceneGraph {
        let mut g = self.clone();
        for (node, f) in g.nodes.iter_mut().zip(features) {
            node.feature = f.clone();
        }
        g
    }

    pub fn check_feature_width(&self, expected: usize) -> Result<(), GraphError> {
        for n in &self.nodes {
            if n.feature.len() != expected {
                return Err(GraphError::FeatureWidth {
                    id: n.id,
                    got: n.feature.len(),
                    expected,
                });
            }
        }
        Ok(())
    }

    pub fn to_json_value(&self) -> GraphJson {
        GraphJson {
            version: GRAPH_JSON_VERSION,
            nodes: self.nodes.clone(),
            edges: self
                .edges
                .iter()
                .map(|&(a, b)| [self.nodes[a].id, self.nodes[b].id])
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_json_value()).expect("graph serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let parsed: GraphJson = serde_json::from_str(text)?;
        parsed.into_graph()
    }
}

/// On-disk graph fixture. `edges` hold node-id pairs; readers rebuild the
/// edge set from positions, so the field is informational.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphJson {
    #[serde(default = "default_version")]
    pub version: u32,
    pub nodes: Vec<ObjectNode>,
    #[serde(default)]
    pub edges: Vec<[u32; 2]>,
}

fn default_version() -> u32 {
    GRAPH_JSON_VERSION
}

impl GraphJson {
    pub fn into_graph(self) -> Result<SceneGraph, GraphError> {
        if self.version != GRAPH_JSON_VERSION {
            return Err(GraphError::Version(self.version));
        }
        build_graph(self.nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: u32, p: [f64; 3]) -> ObjectNode {
        ObjectNode::new(id, p, vec![id as f64, 1.0])
    }

    #[test]
    fn three_four_five() {
        let g = build_graph(vec![node(0, [0.0, 0.0, 0.0]), node(1, [3.0, 0.0, 4.0])]).unwrap();
        assert_eq!(g.adjacency().at(0, 1), 5.0);
        assert_eq!(g.adjacency().at(1, 0), 5.0);
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn single_and_empty() {
        let g = build_graph(vec![node(4, [1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(g.adjacency().shape(), &[1, 1]);
        assert_eq!(g.adjacency().data(), &[0.0]);
        assert!(g.edges().is_empty());
        let e = build_graph(Vec::new()).unwrap();
        assert!(e.is_empty());
        assert_eq!(e.adjacency().shape(), &[0, 0]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = build_graph(vec![node(1, [0.0; 3]), node(1, [1.0, 0.0, 0.0])]);
        assert!(matches!(err, Err(GraphError::DuplicateId(1))));
    }

    #[test]
    fn canonical_order_cases() {
        let sorted: Vec<ObjectNode> = (0..4).map(|i| node(i, [i as f64, 0.0, 0.0])).collect();
        assert_eq!(canonical_order(&sorted), vec![0, 1, 2, 3]);
        let reversed: Vec<ObjectNode> = sorted.iter().rev().cloned().collect();
        assert_eq!(canonical_order(&reversed), vec![3, 2, 1, 0]);
        let tied = vec![node(9, [1.0, 1.0, 1.0]), node(2, [1.0, 1.0, 1.0])];
        assert_eq!(canonical_order(&tied), vec![1, 0]);
    }

    #[test]
    fn json_round_trip() {
        let g = build_graph(vec![
            node(0, [0.0, 0.0, 0.0]),
            node(1, [3.0, 0.5, 4.0]),
            node(2, [-2.0, 1.0, 6.0]),
        ])
        .unwrap();
        let text = g.to_json();
        assert!(text.contains("\"pos\""));
        assert!(text.contains("\"feat\""));
        assert_eq!(SceneGraph::from_json(&text).unwrap(), g);
    }
}
