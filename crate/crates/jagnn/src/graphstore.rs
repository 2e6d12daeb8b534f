//! Bipartite multi-relation transaction graph: storage, CSV loading, and
//! traversal queries.
//!
//! Anchors are the prediction targets (customers/transactions); neighbor
//! nodes are shared attributes (address, phone, payment, ...). Every edge
//! joins exactly one anchor and one neighbor under a single relation and
//! carries a score slot that the sampler fills in before any similarity
//! query runs. The graph is immutable after load except for that one
//! scoring pass.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};

/// Dense node index, stable for the lifetime of a loaded graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Relation index in `[0, R)`. Edge files use these indices directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl RelationId {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Whether a node is a prediction target or a shared attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Anchor,
    Neighbor,
}

/// Label record attached to every anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorLabel {
    /// Binary training target.
    pub fraud: bool,
    /// Raw score in `[0, 100]` as found in the label file.
    pub raw_score: f64,
    /// Transaction time as integer epoch; drives the chronological split.
    pub timestamp: i64,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: malformed row at line {line}: {msg}")]
    MalformedRow {
        file: String,
        line: u64,
        msg: String,
    },
    #[error("{file}: edge references unknown node {node} at line {line}")]
    UnknownNode {
        file: String,
        line: u64,
        node: u64,
    },
    #[error("{file}: non-bipartite edge at line {line} ({a} and {b} share role {role:?})")]
    NonBipartiteEdge {
        file: String,
        line: u64,
        a: u64,
        b: u64,
        role: Role,
    },
    #[error("{file}: node {node} at line {line} has {got} features, expected {expected}")]
    FeatureDimMismatch {
        file: String,
        line: u64,
        node: u64,
        expected: usize,
        got: usize,
    },
    #[error("duplicate node id {0}")]
    DuplicateNode(u64),
    #[error("{file}: duplicate label for node {node} at line {line}")]
    DuplicateLabel { file: String, line: u64, node: u64 },
    #[error("{file}: label for non-anchor node {node} at line {line}")]
    LabelOnNeighbor { file: String, line: u64, node: u64 },
    #[error("anchor {0} has no label row")]
    MissingLabel(u64),
    #[error("node {0} is not an anchor")]
    NotAnAnchor(NodeId),
    #[error("unknown node id {0}")]
    NoSuchNode(u64),
    #[error("graph has no nodes")]
    Empty,
}

/// Per-relation edge set with symmetric adjacency and one score slot per edge.
#[derive(Debug, Clone)]
struct RelationEdges {
    /// Canonical `(anchor, neighbor)` endpoints per edge.
    edges: Vec<(NodeId, NodeId)>,
    /// Per-node incident `(other endpoint, edge index)` pairs.
    adj: Vec<Vec<(NodeId, u32)>>,
    /// Edge scores; NaN until the scoring pass writes them.
    scores: Vec<f64>,
}

impl RelationEdges {
    fn new(n_nodes: usize) -> Self {
        Self {
            edges: Vec::new(),
            adj: vec![Vec::new(); n_nodes],
            scores: Vec::new(),
        }
    }
}

/// The loaded transaction graph.
///
/// Invariants established at build time and preserved afterwards:
/// bipartiteness of every edge, one shared feature dimension, exactly one
/// label per anchor.
#[derive(Debug, Clone)]
pub struct TransactionGraph {
    roles: Vec<Role>,
    features: Vec<f64>,
    feature_dim: usize,
    external_ids: Vec<u64>,
    by_external: HashMap<u64, NodeId>,
    relations: Vec<RelationEdges>,
    labels: Vec<Option<AnchorLabel>>,
    anchors: Vec<NodeId>,
}

/// Node/edge counts reported after a load.
#[derive(Debug, Clone, Serialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub anchors: usize,
    pub neighbors: usize,
    pub feature_dim: usize,
    pub relations: usize,
    pub edges_per_relation: Vec<usize>,
}

impl TransactionGraph {
    pub fn node_count(&self) -> usize {
        self.roles.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// All anchors in load order.
    pub fn anchors(&self) -> &[NodeId] {
        &self.anchors
    }

    pub fn role(&self, v: NodeId) -> Role {
        self.roles[v.idx()]
    }

    pub fn is_anchor(&self, v: NodeId) -> bool {
        self.roles[v.idx()] == Role::Anchor
    }

    pub fn features(&self, v: NodeId) -> &[f64] {
        let d = self.feature_dim;
        &self.features[v.idx() * d..(v.idx() + 1) * d]
    }

    pub fn label(&self, v: NodeId) -> Option<&AnchorLabel> {
        self.labels[v.idx()].as_ref()
    }

    /// External (file) id for a node.
    pub fn external_id(&self, v: NodeId) -> u64 {
        self.external_ids[v.idx()]
    }

    /// Resolve an external (file) id.
    pub fn resolve(&self, external: u64) -> Result<NodeId, GraphError> {
        self.by_external
            .get(&external)
            .copied()
            .ok_or(GraphError::NoSuchNode(external))
    }

    /// Count of incident edges across all relations.
    pub fn degree(&self, v: NodeId) -> usize {
        self.relations.iter().map(|r| r.adj[v.idx()].len()).sum()
    }

    /// Count of incident edges under one relation.
    pub fn degree_in(&self, v: NodeId, r: RelationId) -> usize {
        self.relations[r.idx()].adj[v.idx()].len()
    }

    /// Incident `(other endpoint, edge index)` pairs under one relation.
    pub fn adjacent(&self, v: NodeId, r: RelationId) -> &[(NodeId, u32)] {
        &self.relations[r.idx()].adj[v.idx()]
    }

    pub fn edge_count(&self, r: RelationId) -> usize {
        self.relations[r.idx()].edges.len()
    }

    /// Canonical `(anchor, neighbor)` endpoints of an edge.
    pub fn edge_endpoints(&self, r: RelationId, edge: u32) -> (NodeId, NodeId) {
        self.relations[r.idx()].edges[edge as usize]
    }

    /// Stored edge score; NaN before the scoring pass.
    pub fn edge_score(&self, r: RelationId, edge: u32) -> f64 {
        self.relations[r.idx()].scores[edge as usize]
    }

    pub fn scores_computed(&self) -> bool {
        self.relations
            .iter()
            .all(|r| r.scores.iter().all(|s| s.is_finite()))
    }

    /// Write one edge score. Single-writer phase; takes `&mut self` so no
    /// reader can observe a partially scored graph.
    pub fn set_edge_score(&mut self, r: RelationId, edge: u32, score: f64) {
        self.relations[r.idx()].scores[edge as usize] = score;
    }

    /// Distinct neighboring nodes across all relations, ascending.
    pub fn neighbors_of(&self, v: NodeId) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self
            .relations
            .iter()
            .flat_map(|r| r.adj[v.idx()].iter().map(|&(w, _)| w))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// All anchors reachable from `a` through exactly one neighbor node,
    /// excluding `a` itself.
    pub fn two_hop_anchors(&self, a: NodeId) -> Result<Vec<NodeId>, GraphError> {
        if !self.is_anchor(a) {
            return Err(GraphError::NotAnAnchor(a));
        }
        let mut out: Vec<NodeId> = Vec::new();
        for w in self.neighbors_of(a) {
            for x in self.neighbors_of(w) {
                if x != a && self.is_anchor(x) {
                    out.push(x);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// Distinct neighboring nodes of `v`, undersampled to `cap` when the node
    /// has more. Deterministic per `(rng_seed, v)`.
    pub fn undersample_hypernode(&self, v: NodeId, cap: usize, rng_seed: u64) -> Vec<NodeId> {
        let all = self.neighbors_of(v);
        if all.len() <= cap {
            return all;
        }
        let mut rng = rng::derive(rng_seed, Stream::HypernodeCap, v.0 as u64);
        let mut picked: Vec<NodeId> = all;
        picked.partial_shuffle(&mut rng, cap);
        picked.truncate(cap);
        picked.sort_unstable();
        picked
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            nodes: self.node_count(),
            anchors: self.anchors.len(),
            neighbors: self.node_count() - self.anchors.len(),
            feature_dim: self.feature_dim,
            relations: self.relations.len(),
            edges_per_relation: self.relations.iter().map(|r| r.edges.len()).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

/// Validating builder used by both the CSV loader and the synthetic
/// generator; the only way to construct a [`TransactionGraph`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    roles: Vec<Role>,
    features: Vec<f64>,
    feature_dim: Option<usize>,
    external_ids: Vec<u64>,
    by_external: HashMap<u64, NodeId>,
    edges: Vec<(u64, u64, u32, u64)>, // (src, dst, relation, source line)
    labels: HashMap<u64, AnchorLabel>,
    /// Threshold on the raw score above which an anchor counts as fraud.
    pub fraud_score_threshold: f64,
    node_source: String,
    edge_source: String,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self {
            fraud_score_threshold: 50.0,
            node_source: "<memory>".to_string(),
            edge_source: "<memory>".to_string(),
            ..Default::default()
        }
    }

    pub fn add_node(
        &mut self,
        external: u64,
        role: Role,
        feats: &[f64],
    ) -> Result<NodeId, GraphError> {
        self.add_node_at(external, role, feats, 0)
    }

    fn add_node_at(
        &mut self,
        external: u64,
        role: Role,
        feats: &[f64],
        line: u64,
    ) -> Result<NodeId, GraphError> {
        if self.by_external.contains_key(&external) {
            return Err(GraphError::DuplicateNode(external));
        }
        match self.feature_dim {
            None => self.feature_dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(GraphError::FeatureDimMismatch {
                    file: self.node_source.clone(),
                    line,
                    node: external,
                    expected: d,
                    got: feats.len(),
                })
            }
            _ => {}
        }
        let id = NodeId(self.roles.len() as u32);
        self.roles.push(role);
        self.features.extend_from_slice(feats);
        self.external_ids.push(external);
        self.by_external.insert(external, id);
        Ok(id)
    }

    pub fn add_edge(&mut self, src: u64, dst: u64, relation: u32) {
        self.edges.push((src, dst, relation, 0));
    }

    pub fn add_label(&mut self, external: u64, raw_score: f64, timestamp: i64) {
        self.labels.insert(
            external,
            AnchorLabel {
                fraud: raw_score >= self.fraud_score_threshold,
                raw_score,
                timestamp,
            },
        );
    }

    pub fn build(self) -> Result<TransactionGraph, GraphError> {
        let n = self.roles.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let edge_file = self.edge_source;
        let n_relations = self
            .edges
            .iter()
            .map(|&(_, _, r, _)| r as usize + 1)
            .max()
            .unwrap_or(1);
        let mut relations: Vec<RelationEdges> =
            (0..n_relations).map(|_| RelationEdges::new(n)).collect();

        for &(src, dst, rel, line) in &self.edges {
            let s = *self.by_external.get(&src).ok_or(GraphError::UnknownNode {
                file: edge_file.clone(),
                line,
                node: src,
            })?;
            let d = *self.by_external.get(&dst).ok_or(GraphError::UnknownNode {
                file: edge_file.clone(),
                line,
                node: dst,
            })?;
            let (anchor, neighbor) = match (self.roles[s.idx()], self.roles[d.idx()]) {
                (Role::Anchor, Role::Neighbor) => (s, d),
                (Role::Neighbor, Role::Anchor) => (d, s),
                (role, _) => {
                    return Err(GraphError::NonBipartiteEdge {
                        file: edge_file.clone(),
                        line,
                        a: src,
                        b: dst,
                        role,
                    })
                }
            };
            let r = &mut relations[rel as usize];
            let e = r.edges.len() as u32;
            r.edges.push((anchor, neighbor));
            r.scores.push(f64::NAN);
            r.adj[anchor.idx()].push((neighbor, e));
            r.adj[neighbor.idx()].push((anchor, e));
        }

        let mut labels: Vec<Option<AnchorLabel>> = vec![None; n];
        let mut anchors = Vec::new();
        for (i, role) in self.roles.iter().enumerate() {
            if *role == Role::Anchor {
                let ext = self.external_ids[i];
                let lab = self.labels.get(&ext).ok_or(GraphError::MissingLabel(ext))?;
                labels[i] = Some(*lab);
                anchors.push(NodeId(i as u32));
            }
        }

        Ok(TransactionGraph {
            roles: self.roles,
            features: self.features,
            feature_dim: self.feature_dim.unwrap_or(0),
            external_ids: self.external_ids,
            by_external: self.by_external,
            relations,
            labels,
            anchors,
        })
    }
}

// ---------------------------------------------------------------------------
// CSV loading
// ---------------------------------------------------------------------------

/// Load a graph from the three-file CSV layout.
///
/// * `node_file`: `node_id,role,feat_0,...,feat_{d-1}` with role `anchor` or
///   `neighbor`
/// * `edge_file`: `src_id,dst_id,relation_id`
/// * `label_file`: `node_id,fraud_score,timestamp` (anchors only)
///
/// All files are UTF-8 with a required header row; lines starting with `#`
/// are ignored. Raw fraud scores are binarized at `fraud_score_threshold`.
pub fn load_graph(
    node_file: &Path,
    edge_file: &Path,
    label_file: &Path,
    fraud_score_threshold: f64,
) -> Result<TransactionGraph, GraphError> {
    let mut b = GraphBuilder::new();
    b.fraud_score_threshold = fraud_score_threshold;
    b.node_source = node_file.display().to_string();
    b.edge_source = edge_file.display().to_string();

    let node_name = node_file.display().to_string();
    for rec in read_csv(node_file)? {
        let (line, fields) = rec?;
        if fields.len() < 2 {
            return Err(GraphError::MalformedRow {
                file: node_name.clone(),
                line,
                msg: format!("expected at least 2 columns, got {}", fields.len()),
            });
        }
        let id = parse_u64(&fields[0], &node_name, line)?;
        let role = match fields[1].trim() {
            "anchor" => Role::Anchor,
            "neighbor" => Role::Neighbor,
            other => {
                return Err(GraphError::MalformedRow {
                    file: node_name.clone(),
                    line,
                    msg: format!("unknown role {other:?}"),
                })
            }
        };
        let feats = fields[2..]
            .iter()
            .map(|f| parse_f64(f, &node_name, line))
            .collect::<Result<Vec<_>, _>>()?;
        if feats.iter().any(|f| !f.is_finite()) {
            return Err(GraphError::MalformedRow {
                file: node_name.clone(),
                line,
                msg: "non-finite feature value".to_string(),
            });
        }
        b.add_node_at(id, role, &feats, line)?;
    }

    let edge_name = edge_file.display().to_string();
    for rec in read_csv(edge_file)? {
        let (line, fields) = rec?;
        if fields.len() != 3 {
            return Err(GraphError::MalformedRow {
                file: edge_name.clone(),
                line,
                msg: format!("expected 3 columns, got {}", fields.len()),
            });
        }
        let src = parse_u64(&fields[0], &edge_name, line)?;
        let dst = parse_u64(&fields[1], &edge_name, line)?;
        let rel = parse_u64(&fields[2], &edge_name, line)? as u32;
        b.edges.push((src, dst, rel, line));
    }

    let label_name = label_file.display().to_string();
    let mut seen = HashMap::new();
    for rec in read_csv(label_file)? {
        let (line, fields) = rec?;
        if fields.len() != 3 {
            return Err(GraphError::MalformedRow {
                file: label_name.clone(),
                line,
                msg: format!("expected 3 columns, got {}", fields.len()),
            });
        }
        let id = parse_u64(&fields[0], &label_name, line)?;
        let score = parse_f64(&fields[1], &label_name, line)?;
        let ts = parse_i64(&fields[2], &label_name, line)?;
        if seen.insert(id, line).is_some() {
            return Err(GraphError::DuplicateLabel {
                file: label_name.clone(),
                line,
                node: id,
            });
        }
        match b.by_external.get(&id) {
            None => {
                return Err(GraphError::UnknownNode {
                    file: label_name.clone(),
                    line,
                    node: id,
                })
            }
            Some(n) if b.roles[n.idx()] != Role::Anchor => {
                return Err(GraphError::LabelOnNeighbor {
                    file: label_name.clone(),
                    line,
                    node: id,
                })
            }
            _ => {}
        }
        b.add_label(id, score, ts);
    }

    b.build()
}

/// Load `nodes.csv`, `edges.csv`, `labels.csv` from one directory.
pub fn load_graph_dir(dir: &Path, fraud_score_threshold: f64) -> Result<TransactionGraph, GraphError> {
    load_graph(
        &dir.join("nodes.csv"),
        &dir.join("edges.csv"),
        &dir.join("labels.csv"),
        fraud_score_threshold,
    )
}

type CsvRow = Result<(u64, Vec<String>), GraphError>;

fn read_csv(path: &Path) -> Result<Vec<CsvRow>, GraphError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (i, raw) in text.lines().enumerate() {
        let line = (i + 1) as u64;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !header_seen {
            header_seen = true; // header row required, content not validated
            continue;
        }
        let fields: Vec<String> = trimmed.split(',').map(|s| s.trim().to_string()).collect();
        rows.push(Ok((line, fields)));
    }
    if !header_seen {
        return Err(GraphError::MalformedRow {
            file: path.display().to_string(),
            line: 0,
            msg: "missing header row".to_string(),
        });
    }
    Ok(rows)
}

fn parse_u64(s: &str, file: &str, line: u64) -> Result<u64, GraphError> {
    s.parse().map_err(|_| GraphError::MalformedRow {
        file: file.to_string(),
        line,
        msg: format!("expected unsigned integer, got {s:?}"),
    })
}

fn parse_i64(s: &str, file: &str, line: u64) -> Result<i64, GraphError> {
    s.parse().map_err(|_| GraphError::MalformedRow {
        file: file.to_string(),
        line,
        msg: format!("expected integer, got {s:?}"),
    })
}

fn parse_f64(s: &str, file: &str, line: u64) -> Result<f64, GraphError> {
    s.parse().map_err(|_| GraphError::MalformedRow {
        file: file.to_string(),
        line,
        msg: format!("expected number, got {s:?}"),
    })
}
