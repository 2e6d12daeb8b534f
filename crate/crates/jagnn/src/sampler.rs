//! Mutual-neighbor similarity sampling.
//!
//! The pipeline per target anchor:
//!
//! 1. Per-relation feature covariances over the edge-participating nodes,
//!    ridge-regularized and inverted once up front.
//! 2. Every edge gets a score: reciprocal Mahalanobis distance between its
//!    anchor and neighbor features under that relation's covariance (1 when
//!    the distance is 0).
//! 3. Two-hop anchor candidates are ranked by the weighted mutual neighbor
//!    coefficient (WMNC): the mean over common neighbors of the paired edge
//!    scores, normalized by twice the smaller anchor degree.
//! 4. `k_top` is the WMNC prefix whose two-cluster silhouette (top-k plus
//!    target vs. the rest, Euclidean in feature space) is maximal.
//! 5. A uniform sample of `round(epsilon * |remainder|)` non-selected
//!    candidates is kept aside to feed the jump path.
//!
//! Hypernodes are undersampled to a fixed neighbor cap before any traversal.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::graphstore::{GraphError, NodeId, RelationId, TransactionGraph};
use crate::rng::{self, Stream};

/// Relations are tracked in a u64 bitmask during traversal.
pub const MAX_RELATIONS: usize = 64;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("node {0} is not an anchor")]
    NotAnAnchor(NodeId),
    #[error("edge scores have not been computed for this graph")]
    EdgeScoresMissing,
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("mahalanobis distance takes a non-negative input, got {0}")]
    NegativeDistance(f64),
    #[error("non-finite feature value encountered in relation {0}")]
    NonFiniteFeatures(usize),
    #[error("epsilon must lie in [0, 1], got {0}")]
    EpsilonRange(f64),
    #[error("graph has {0} relations, covariances were computed for {1}")]
    RelationCountMismatch(usize, usize),
    #[error("graph supports at most {MAX_RELATIONS} relations, got {0}")]
    TooManyRelations(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

// ---------------------------------------------------------------------------
// Covariances and edge scores
// ---------------------------------------------------------------------------

/// Covariance statistics for one relation.
#[derive(Debug, Clone, Serialize)]
pub struct RelationCovariance {
    pub mean: Vec<f64>,
    /// d x d covariance before the ridge term.
    pub matrix: Vec<f64>,
    /// Inverse of `matrix + ridge * I`.
    pub inverse: Vec<f64>,
    pub ridge: f64,
    /// Set when the relation had fewer than two participating nodes and fell
    /// back to the identity covariance.
    pub fallback_identity: bool,
    pub population: usize,
}

/// Per-relation covariances, frozen after computation.
#[derive(Debug, Clone, Serialize)]
pub struct CovarianceSet {
    pub feature_dim: usize,
    pub relations: Vec<RelationCovariance>,
}

impl CovarianceSet {
    /// Mahalanobis distance between two feature vectors under one relation.
    pub fn mahalanobis(&self, r: RelationId, a: &[f64], b: &[f64]) -> Result<f64, SamplerError> {
        mahalanobis(a, b, &self.relations[r.idx()].inverse)
    }
}

/// Mahalanobis distance `sqrt((a-b)^T inv (a-b))` for a positive-definite
/// `inv` given row-major.
pub fn mahalanobis(a: &[f64], b: &[f64], inverse: &[f64]) -> Result<f64, SamplerError> {
    let d = a.len();
    if b.len() != d || inverse.len() != d * d {
        return Err(SamplerError::DimensionMismatch {
            expected: d,
            got: if b.len() != d { b.len() } else { inverse.len() },
        });
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let mut q = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for j in 0..d {
            row += inverse[i * d + j] * diff[j];
        }
        q += diff[i] * row;
    }
    // the quadratic form is mathematically >= 0; rounding can leave a tiny
    // negative residue
    Ok(q.max(0.0).sqrt())
}

/// Edge score: 1 when the distance is 0, reciprocal distance otherwise.
pub fn edge_score(d_m: f64) -> Result<f64, SamplerError> {
    if d_m < 0.0 {
        return Err(SamplerError::NegativeDistance(d_m));
    }
    Ok(if d_m == 0.0 { 1.0 } else { 1.0 / d_m })
}

/// Smoothed alternative `1 / (1 + d)`; continuous at 0 and bounded by 1.
/// Off by default, selectable in the config.
pub fn edge_score_smoothed(d_m: f64) -> Result<f64, SamplerError> {
    if d_m < 0.0 {
        return Err(SamplerError::NegativeDistance(d_m));
    }
    Ok(1.0 / (1.0 + d_m))
}

/// Compute per-relation covariances over all endpoints of each relation's
/// edges. `ridge` of `None` uses `max(1e-9, 1e-6 * trace / d)`.
pub fn compute_covariances(
    g: &TransactionGraph,
    ridge: Option<f64>,
) -> Result<CovarianceSet, SamplerError> {
    compute_covariances_scoped(g, ridge, None)
}

/// Covariances restricted to edges whose anchor endpoint passes the filter.
/// The trainer uses this to freeze train-split statistics.
pub fn compute_covariances_scoped(
    g: &TransactionGraph,
    ridge: Option<f64>,
    anchor_filter: Option<&HashSet<NodeId>>,
) -> Result<CovarianceSet, SamplerError> {
    let d = g.feature_dim();
    if g.relation_count() > MAX_RELATIONS {
        return Err(SamplerError::TooManyRelations(g.relation_count()));
    }
    let mut relations = Vec::with_capacity(g.relation_count());
    for r in 0..g.relation_count() {
        let rel = RelationId(r as u32);
        let mut member = vec![false; g.node_count()];
        for e in 0..g.edge_count(rel) {
            let (a, w) = g.edge_endpoints(rel, e as u32);
            if anchor_filter.map_or(true, |f| f.contains(&a)) {
                member[a.idx()] = true;
                member[w.idx()] = true;
            }
        }
        let nodes: Vec<NodeId> = (0..g.node_count() as u32)
            .map(NodeId)
            .filter(|v| member[v.idx()])
            .collect();
        relations.push(relation_covariance(g, r, &nodes, d, ridge)?);
    }
    Ok(CovarianceSet {
        feature_dim: d,
        relations,
    })
}

fn relation_covariance(
    g: &TransactionGraph,
    relation: usize,
    nodes: &[NodeId],
    d: usize,
    ridge: Option<f64>,
) -> Result<RelationCovariance, SamplerError> {
    let m = nodes.len();
    if m < 2 {
        // reported via the fallback flag; Mahalanobis degrades to Euclidean
        return Ok(RelationCovariance {
            mean: vec![0.0; d],
            matrix: identity(d),
            inverse: identity(d),
            ridge: 0.0,
            fallback_identity: true,
            population: m,
        });
    }
    let mut mean = vec![0.0; d];
    for &v in nodes {
        for (s, &x) in mean.iter_mut().zip(g.features(v)) {
            if !x.is_finite() {
                return Err(SamplerError::NonFiniteFeatures(relation));
            }
            *s += x;
        }
    }
    for s in &mut mean {
        *s /= m as f64;
    }
    let mut cov = vec![0.0; d * d];
    for &v in nodes {
        let f = g.features(v);
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (f[j] - mean[j]);
            }
        }
    }
    let denom = (m - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= denom;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let mut lambda = ridge
        .unwrap_or_else(|| (1e-6 * trace / d as f64).max(1e-9))
        .max(1e-12);
    // escalate if the regularized matrix is still numerically indefinite
    for _ in 0..40 {
        let mut reg = cov.clone();
        for i in 0..d {
            reg[i * d + i] += lambda;
        }
        if let Some(inverse) = spd_inverse(&reg, d) {
            return Ok(RelationCovariance {
                mean,
                matrix: cov,
                inverse,
                ridge: lambda,
                fallback_identity: false,
                population: m,
            });
        }
        lambda = (lambda * 10.0).max(1e-9);
    }
    Ok(RelationCovariance {
        mean,
        matrix: cov,
        inverse: identity(d),
        ridge: lambda,
        fallback_identity: true,
        population: m,
    })
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

/// Cholesky factorization; `None` when the matrix is not positive definite.
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky solves.
fn spd_inverse(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let l = cholesky(a, d)?;
    let mut inv = vec![0.0; d * d];
    let mut col = vec![0.0; d];
    for c in 0..d {
        // forward solve L y = e_c
        for i in 0..d {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i * d + k] * col[k];
            }
            col[i] = s / l[i * d + i];
        }
        // back solve L^T x = y
        for i in (0..d).rev() {
            let mut s = col[i];
            for k in (i + 1)..d {
                s -= l[k * d + i] * col[k];
            }
            col[i] = s / l[i * d + i];
        }
        for i in 0..d {
            inv[i * d + c] = col[i];
        }
    }
    Some(inv)
}

/// Fill every edge-score slot using that relation's covariance. Single-writer
/// phase over `&mut` graph; must run before any WMNC query.
pub fn score_all_edges(
    g: &mut TransactionGraph,
    cov: &CovarianceSet,
    smoothed: bool,
) -> Result<(), SamplerError> {
    if cov.relations.len() != g.relation_count() {
        return Err(SamplerError::RelationCountMismatch(
            g.relation_count(),
            cov.relations.len(),
        ));
    }
    if cov.feature_dim != g.feature_dim() {
        return Err(SamplerError::DimensionMismatch {
            expected: g.feature_dim(),
            got: cov.feature_dim,
        });
    }
    for r in 0..g.relation_count() {
        let rel = RelationId(r as u32);
        for e in 0..g.edge_count(rel) as u32 {
            let (a, w) = g.edge_endpoints(rel, e);
            let d = cov.mahalanobis(rel, g.features(a), g.features(w))?;
            let s = if smoothed {
                edge_score_smoothed(d)?
            } else {
                edge_score(d)?
            };
            g.set_edge_score(rel, e, s);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// WMNC
// ---------------------------------------------------------------------------

/// Weighted mutual neighbor coefficient between two anchors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WmncScore {
    pub pair: (NodeId, NodeId),
    pub value: f64,
}

/// Pair weight per distinct neighbor: sum of the stored scores across all
/// parallel edges, keyed ascending by neighbor id.
fn neighbor_weights(
    g: &TransactionGraph,
    a: NodeId,
) -> Result<BTreeMap<NodeId, f64>, SamplerError> {
    let mut out = BTreeMap::new();
    for r in 0..g.relation_count() {
        let rel = RelationId(r as u32);
        for &(w, e) in g.adjacent(a, rel) {
            let s = g.edge_score(rel, e);
            if !s.is_finite() {
                return Err(SamplerError::EdgeScoresMissing);
            }
            *out.entry(w).or_insert(0.0) += s;
        }
    }
    Ok(out)
}

/// WMNC of two anchors: mean over common neighbors of the paired edge
/// scores, normalized by twice the smaller degree. Zero without common
/// neighbors.
pub fn wmnc(g: &TransactionGraph, a1: NodeId, a2: NodeId) -> Result<WmncScore, SamplerError> {
    for a in [a1, a2] {
        if !g.is_anchor(a) {
            return Err(SamplerError::NotAnAnchor(a));
        }
    }
    let map1 = neighbor_weights(g, a1)?;
    let map2 = neighbor_weights(g, a2)?;
    let value = wmnc_from_maps(&map1, g.degree(a1), &map2, g.degree(a2));
    Ok(WmncScore {
        pair: (a1, a2),
        value,
    })
}

fn wmnc_from_maps(
    target_map: &BTreeMap<NodeId, f64>,
    target_deg: usize,
    other_map: &BTreeMap<NodeId, f64>,
    other_deg: usize,
) -> f64 {
    let denom = 2.0 * target_deg.min(other_deg) as f64;
    let mut sum = 0.0;
    let mut common = 0usize;
    for (u, w2) in other_map {
        if let Some(w1) = target_map.get(u) {
            sum += (w1 + w2) / denom;
            common += 1;
        }
    }
    if common == 0 {
        0.0
    } else {
        sum / common as f64
    }
}

// ---------------------------------------------------------------------------
// Silhouette-based k selection
// ---------------------------------------------------------------------------

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette over all candidates for the binary clustering
/// {first k candidates + target} vs {rest}, from per-candidate prefix sums
/// over the rank order. Singleton clusters and all-zero distances
/// contribute 0.
fn silhouette_for_k(prefix: &[Vec<f64>], dist_target: &[f64], n: usize, k: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..n {
        let (a, b) = if j < k {
            let a = (prefix[j][k] + dist_target[j]) / k as f64;
            let b = (prefix[j][n] - prefix[j][k]) / (n - k) as f64;
            (a, b)
        } else {
            let own = n - k - 1;
            if own == 0 {
                continue; // singleton cluster contributes 0
            }
            let a = (prefix[j][n] - prefix[j][k]) / own as f64;
            let b = (prefix[j][k] + dist_target[j]) / (k + 1) as f64;
            (a, b)
        };
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Pick the WMNC-ranked prefix maximizing the two-cluster silhouette.
///
/// `ranked` must be ordered by descending WMNC with ascending-id tie-breaks.
/// Returns all candidates when no split leaves both clusters non-empty
/// within `[k_min, k_max]`; ties on the score go to the smallest k.
pub fn select_k_top(
    g: &TransactionGraph,
    target: NodeId,
    ranked: &[NodeId],
    k_min: usize,
    k_max: usize,
) -> Vec<NodeId> {
    let n = ranked.len();
    if n == 0 {
        return Vec::new();
    }
    let k_hi = k_max.min(n - 1);
    if n <= k_min || k_hi < k_min {
        return ranked.to_vec();
    }
    let feats: Vec<&[f64]> = ranked.iter().map(|&c| g.features(c)).collect();
    let tfeat = g.features(target);
    let dist_target: Vec<f64> = feats.iter().map(|f| euclidean(f, tfeat)).collect();
    let mut prefix = vec![vec![0.0; n + 1]; n];
    for j in 0..n {
        for i in 0..n {
            prefix[j][i + 1] = prefix[j][i] + euclidean(feats[j], feats[i]);
        }
    }
    let mut best_k = k_min;
    let mut best = f64::NEG_INFINITY;
    for k in k_min..=k_hi {
        let s = silhouette_for_k(&prefix, &dist_target, n, k);
        if s > best {
            best = s;
            best_k = k;
        }
    }
    ranked[..best_k].to_vec()
}

// ---------------------------------------------------------------------------
// Neighborhood sampling
// ---------------------------------------------------------------------------

/// Which anchors receive attention vs. jump treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SamplerMode {
    /// Silhouette-selected `k_top` plus epsilon-random remainder.
    KTop,
    /// No filtering: every two-hop candidate feeds both paths.
    AllCandidates,
}

#[derive(Debug, Clone)]
pub struct SamplerOptions {
    pub epsilon: f64,
    pub seed: u64,
    pub k_min: usize,
    pub k_max: usize,
    pub hypernode_cap: usize,
    pub mode: SamplerMode,
    /// When set, only these anchors may appear as candidates (split-scoped
    /// visibility during training).
    pub anchor_filter: Option<HashSet<NodeId>>,
    /// Populate `induced_edges` and `wmnc_scores` on results.
    pub with_details: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            seed: 42,
            k_min: 1,
            k_max: 64,
            hypernode_cap: 100,
            mode: SamplerMode::KTop,
            anchor_filter: None,
            with_details: true,
        }
    }
}

/// Result of sampling one target anchor's neighborhood.
#[derive(Debug, Clone, Serialize)]
pub struct SampledSubgraph {
    pub target: NodeId,
    /// Attention anchors, descending WMNC.
    pub k_top: Vec<NodeId>,
    /// Jump anchors, ascending id.
    pub n_random: Vec<NodeId>,
    /// One-hop neighbor nodes of target, k_top, and n_random, ascending.
    pub neighbor_closure: Vec<NodeId>,
    /// `(anchor, neighbor)` pairs inside the subgraph, per relation; filled
    /// only when details are requested.
    pub induced_edges: Vec<Vec<(NodeId, NodeId)>>,
    /// Candidate WMNC values in rank order; filled only when details are
    /// requested.
    pub wmnc_scores: Vec<WmncScore>,
    /// Bitmask of relations linking each selected anchor to the target
    /// through a shared neighbor under the same relation.
    pub relation_links: HashMap<NodeId, u64>,
}

impl SampledSubgraph {
    /// Anchors of the subgraph: target, k_top, n_random (deduplicated).
    pub fn anchor_set(&self) -> Vec<NodeId> {
        let mut out = vec![self.target];
        out.extend(&self.k_top);
        out.extend(&self.n_random);
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Sampling pipeline bound to a scored graph. Pure reads; one instance may be
/// shared across threads once constructed.
pub struct Sampler<'g> {
    graph: &'g TransactionGraph,
    opts: SamplerOptions,
}

impl<'g> Sampler<'g> {
    pub fn new(graph: &'g TransactionGraph, opts: SamplerOptions) -> Result<Self, SamplerError> {
        if !(0.0..=1.0).contains(&opts.epsilon) {
            return Err(SamplerError::EpsilonRange(opts.epsilon));
        }
        if !graph.scores_computed() {
            return Err(SamplerError::EdgeScoresMissing);
        }
        if graph.relation_count() > MAX_RELATIONS {
            return Err(SamplerError::TooManyRelations(graph.relation_count()));
        }
        Ok(Self { graph, opts })
    }

    pub fn options(&self) -> &SamplerOptions {
        &self.opts
    }

    pub fn graph(&self) -> &'g TransactionGraph {
        self.graph
    }

    fn capped_neighbors(&self, v: NodeId) -> Vec<NodeId> {
        self.graph
            .undersample_hypernode(v, self.opts.hypernode_cap, self.opts.seed)
    }

    /// Bitmask of relations under which `a` and `b` share an edge.
    fn edge_relations(&self, a: NodeId, b: NodeId) -> u64 {
        let mut mask = 0u64;
        for r in 0..self.graph.relation_count() {
            if self
                .graph
                .adjacent(a, RelationId(r as u32))
                .iter()
                .any(|&(w, _)| w == b)
            {
                mask |= 1 << r;
            }
        }
        mask
    }

    /// Two-hop candidates through the capped adjacency, with the bitmask of
    /// relations carried by same-relation paths.
    fn candidates(&self, target: NodeId) -> Result<BTreeMap<NodeId, u64>, SamplerError> {
        if !self.graph.is_anchor(target) {
            return Err(SamplerError::NotAnAnchor(target));
        }
        let mut out: BTreeMap<NodeId, u64> = BTreeMap::new();
        for w in self.capped_neighbors(target) {
            let mask_tw = self.edge_relations(target, w);
            for a in self.capped_neighbors(w) {
                if a == target || !self.graph.is_anchor(a) {
                    continue;
                }
                if let Some(filter) = &self.opts.anchor_filter {
                    if !filter.contains(&a) {
                        continue;
                    }
                }
                let mask_wa = self.edge_relations(w, a);
                *out.entry(a).or_insert(0) |= mask_tw & mask_wa;
            }
        }
        Ok(out)
    }

    /// Sample the neighborhood of `target`.
    pub fn sample(&self, target: NodeId) -> Result<SampledSubgraph, SamplerError> {
        let candidate_rels = self.candidates(target)?;
        let target_map = neighbor_weights(self.graph, target)?;
        let target_deg = self.graph.degree(target);

        // rank by (wmnc desc, id asc)
        let mut ranked: Vec<(NodeId, f64)> = Vec::with_capacity(candidate_rels.len());
        for &c in candidate_rels.keys() {
            let map = neighbor_weights(self.graph, c)?;
            let v = wmnc_from_maps(&target_map, target_deg, &map, self.graph.degree(c));
            ranked.push((c, v));
        }
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let ranked_ids: Vec<NodeId> = ranked.iter().map(|&(c, _)| c).collect();

        let (k_top, n_random) = match self.opts.mode {
            SamplerMode::AllCandidates => (ranked_ids.clone(), ranked_ids.clone()),
            SamplerMode::KTop => {
                let k_top = select_k_top(
                    self.graph,
                    target,
                    &ranked_ids,
                    self.opts.k_min,
                    self.opts.k_max,
                );
                let chosen: HashSet<NodeId> = k_top.iter().copied().collect();
                let mut remainder: Vec<NodeId> = ranked_ids
                    .iter()
                    .copied()
                    .filter(|c| !chosen.contains(c))
                    .collect();
                remainder.sort_unstable();
                let take =
                    round_half_up(self.opts.epsilon * remainder.len() as f64).min(remainder.len());
                let mut rng = rng::derive(self.opts.seed, Stream::RandomAugment, target.0 as u64);
                let n_random = partial_sample(&mut rng, remainder, take);
                (k_top, n_random)
            }
        };

        let mut n_random = n_random;
        n_random.sort_unstable();

        let mut anchors = vec![target];
        anchors.extend(&k_top);
        anchors.extend(&n_random);
        anchors.sort_unstable();
        anchors.dedup();

        let mut closure: Vec<NodeId> = anchors
            .iter()
            .flat_map(|&a| self.capped_neighbors(a))
            .collect();
        closure.sort_unstable();
        closure.dedup();

        let mut induced_edges = Vec::new();
        let mut wmnc_scores = Vec::new();
        if self.opts.with_details {
            let closure_set: HashSet<NodeId> = closure.iter().copied().collect();
            induced_edges = vec![Vec::new(); self.graph.relation_count()];
            for &a in &anchors {
                for w in self.capped_neighbors(a) {
                    if !closure_set.contains(&w) {
                        continue;
                    }
                    let mask = self.edge_relations(a, w);
                    for (r, edges) in induced_edges.iter_mut().enumerate() {
                        if mask & (1 << r) != 0 {
                            edges.push((a, w));
                        }
                    }
                }
            }
            wmnc_scores = ranked
                .iter()
                .map(|&(c, value)| WmncScore {
                    pair: (target, c),
                    value,
                })
                .collect();
        }

        let mut relation_links = HashMap::new();
        for id in k_top.iter().chain(&n_random) {
            relation_links.insert(*id, *candidate_rels.get(id).unwrap_or(&0));
        }

        Ok(SampledSubgraph {
            target,
            k_top,
            n_random,
            neighbor_closure: closure,
            induced_edges,
            wmnc_scores,
            relation_links,
        })
    }
}

/// Memoizes one sampled subgraph per anchor. Sampling is deterministic per
/// `(seed, target)`, so the cache is semantically invisible; it exists
/// because training revisits the same anchors every epoch.
pub struct SampleCache<'g> {
    sampler: Sampler<'g>,
    map: HashMap<NodeId, std::rc::Rc<SampledSubgraph>>,
}

impl<'g> SampleCache<'g> {
    pub fn new(sampler: Sampler<'g>) -> Self {
        Self {
            sampler,
            map: HashMap::new(),
        }
    }

    pub fn sampler(&self) -> &Sampler<'g> {
        &self.sampler
    }

    pub fn get(&mut self, target: NodeId) -> Result<std::rc::Rc<SampledSubgraph>, SamplerError> {
        if let Some(hit) = self.map.get(&target) {
            return Ok(hit.clone());
        }
        let sub = std::rc::Rc::new(self.sampler.sample(target)?);
        self.map.insert(target, sub.clone());
        Ok(sub)
    }

    /// Precompute many anchors in parallel; results are order-independent.
    pub fn warm(&mut self, targets: &[NodeId]) -> Result<(), SamplerError> {
        use rayon::prelude::*;
        let missing: Vec<NodeId> = targets
            .iter()
            .copied()
            .filter(|t| !self.map.contains_key(t))
            .collect();
        let sampler = &self.sampler;
        let computed: Result<Vec<(NodeId, SampledSubgraph)>, SamplerError> = missing
            .par_iter()
            .map(|&t| sampler.sample(t).map(|s| (t, s)))
            .collect();
        for (t, s) in computed? {
            self.map.insert(t, std::rc::Rc::new(s));
        }
        Ok(())
    }
}

/// Round-half-up used for the epsilon share of the remainder.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

fn partial_sample<T>(rng: &mut impl rand::Rng, mut pool: Vec<T>, take: usize) -> Vec<T> {
    use rand::seq::SliceRandom;
    let take = take.min(pool.len());
    pool.partial_shuffle(rng, take);
    pool.truncate(take);
    pool
}

/// One-call form covering a single target with default selection bounds;
/// validates that `cov` matches the graph the scores were computed with.
pub fn sample_neighborhood(
    g: &TransactionGraph,
    target: NodeId,
    epsilon: f64,
    rng_seed: u64,
    cov: &CovarianceSet,
) -> Result<SampledSubgraph, SamplerError> {
    if cov.relations.len() != g.relation_count() {
        return Err(SamplerError::RelationCountMismatch(
            g.relation_count(),
            cov.relations.len(),
        ));
    }
    let sampler = Sampler::new(
        g,
        SamplerOptions {
            epsilon,
            seed: rng_seed,
            ..Default::default()
        },
    )?;
    sampler.sample(target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphstore::{GraphBuilder, Role};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // -- covariance -------------------------------------------------------

    fn two_node_graph(f1: &[f64], f2: &[f64]) -> TransactionGraph {
        let mut b = GraphBuilder::new();
        b.add_node(0, Role::Anchor, f1).unwrap();
        b.add_node(1, Role::Neighbor, f2).unwrap();
        b.add_edge(0, 1, 0);
        b.add_label(0, 0.0, 0);
        b.build().unwrap()
    }

    #[test]
    fn covariance_hand_computed_two_nodes() {
        let g = two_node_graph(&[0.0, 0.0], &[2.0, 2.0]);
        let cov = compute_covariances(&g, Some(0.0)).unwrap();
        let c = &cov.relations[0];
        // mean (1,1); each deviation (+-1,+-1); denominator |V|_r - 1 = 1
        assert_eq!(c.matrix, vec![2.0, 2.0, 2.0, 2.0]);
        assert_eq!(c.population, 2);
        assert!(!c.fallback_identity);
    }

    #[test]
    fn zero_variance_ridge_inverse() {
        let g = two_node_graph(&[3.0, -1.0], &[3.0, -1.0]);
        let ridge = 0.5;
        let cov = compute_covariances(&g, Some(ridge)).unwrap();
        let c = &cov.relations[0];
        assert_eq!(c.matrix, vec![0.0; 4]);
        // inverse of ridge * I is I / ridge
        assert!((c.inverse[0] - 1.0 / ridge).abs() < 1e-12);
        assert!((c.inverse[3] - 1.0 / ridge).abs() < 1e-12);
        assert!(c.inverse[1].abs() < 1e-12 && c.inverse[2].abs() < 1e-12);
    }

    #[test]
    fn iid_standard_normal_covariance_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let d = 3;
        let n = 10_000;
        let mut b = GraphBuilder::new();
        for i in 0..n {
            let f: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
            let role = if i % 2 == 0 { Role::Anchor } else { Role::Neighbor };
            b.add_node(i as u64, role, &f).unwrap();
            if i % 2 == 0 {
                b.add_label(i as u64, 0.0, i as i64);
            }
        }
        for i in (0..n - 1).step_by(2) {
            b.add_edge(i as u64, i as u64 + 1, 0);
        }
        let g = b.build().unwrap();
        let cov = compute_covariances(&g, Some(0.0)).unwrap();
        let c = &cov.relations[0];
        for i in 0..d {
            for j in 0..d {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (c.matrix[i * d + j] - expect).abs() < 0.1,
                    "cov[{i}][{j}] = {}",
                    c.matrix[i * d + j]
                );
            }
        }
    }

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn fallback_identity_for_degenerate_relation() {
        // relation 0 has no edges, relation 1 has one
        let mut b = GraphBuilder::new();
        b.add_node(0, Role::Anchor, &[1.0]).unwrap();
        b.add_node(1, Role::Neighbor, &[2.0]).unwrap();
        b.add_edge(0, 1, 1);
        b.add_label(0, 0.0, 0);
        let g = b.build().unwrap();
        let cov = compute_covariances(&g, None).unwrap();
        assert!(cov.relations[0].fallback_identity);
        assert_eq!(cov.relations[0].population, 0);
        assert!(!cov.relations[1].fallback_identity);
    }

    // -- mahalanobis / edge score ------------------------------------------

    #[test]
    fn mahalanobis_identical_vectors_is_zero() {
        let inv = identity(3);
        let d = mahalanobis(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &inv).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn mahalanobis_identity_is_euclidean() {
        let inv = identity(2);
        let d = mahalanobis(&[3.0, 0.0], &[0.0, 4.0], &inv).unwrap();
        assert!((d - 5.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let m = mahalanobis(&a, &b, &identity(5)).unwrap();
            let e = euclidean(&a, &b);
            assert!((m - e).abs() < 1e-9);
        }
    }

    #[test]
    fn mahalanobis_diagonal_closed_form() {
        // C = diag(4, 1) so inverse is diag(1/4, 1)
        let inv = vec![0.25, 0.0, 0.0, 1.0];
        let d = mahalanobis(&[2.0, 0.0], &[0.0, 0.0], &inv).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_dimension_mismatch() {
        let inv = identity(2);
        assert!(matches!(
            mahalanobis(&[1.0, 2.0], &[1.0], &inv),
            Err(SamplerError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn edge_score_cases() {
        assert_eq!(edge_score(0.0).unwrap(), 1.0);
        assert_eq!(edge_score(2.0).unwrap(), 0.5);
        assert_eq!(edge_score(0.25).unwrap(), 4.0);
        assert!(matches!(
            edge_score(-0.1),
            Err(SamplerError::NegativeDistance(_))
        ));
        assert!((edge_score_smoothed(1.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn edge_score_monotone_non_increasing() {
        let mut prev = f64::INFINITY;
        for i in 0..1000 {
            let d = i as f64 * 0.01 + 1e-6;
            let s = edge_score(d).unwrap();
            assert!(s > 0.0 && s <= prev);
            prev = s;
        }
    }

    // -- edge scoring pass --------------------------------------------------

    #[test]
    fn score_single_edge_identical_endpoints() {
        let mut g = two_node_graph(&[1.0, 1.0], &[1.0, 1.0]);
        let cov = compute_covariances(&g, Some(1.0)).unwrap();
        score_all_edges(&mut g, &cov, false).unwrap();
        assert_eq!(g.edge_score(RelationId(0), 0), 1.0);
    }

    #[test]
    fn score_two_relations_uses_per_relation_covariance() {
        let mut b = GraphBuilder::new();
        let feats: [[f64; 2]; 6] = [
            [0.0, 0.0],
            [1.0, 0.5],
            [2.0, 1.5],
            [0.5, 4.0],
            [1.5, 2.0],
            [3.0, 0.0],
        ];
        for (i, f) in feats.iter().enumerate() {
            let role = if i < 2 { Role::Anchor } else { Role::Neighbor };
            b.add_node(i as u64, role, f).unwrap();
            if i < 2 {
                b.add_label(i as u64, 0.0, i as i64);
            }
        }
        b.add_edge(0, 2, 0);
        b.add_edge(0, 3, 0);
        b.add_edge(1, 4, 1);
        b.add_edge(1, 5, 1);
        let mut g = b.build().unwrap();
        let cov = compute_covariances(&g, Some(0.01)).unwrap();
        score_all_edges(&mut g, &cov, false).unwrap();
        // oracle: recompute each edge from its own relation's inverse
        for r in 0..2 {
            let rel = RelationId(r);
            for e in 0..g.edge_count(rel) as u32 {
                let (a, w) = g.edge_endpoints(rel, e);
                let d = mahalanobis(
                    g.features(a),
                    g.features(w),
                    &cov.relations[r as usize].inverse,
                )
                .unwrap();
                let expect = if d == 0.0 { 1.0 } else { 1.0 / d };
                assert_eq!(g.edge_score(rel, e), expect);
            }
        }
        // and the two relations genuinely differ
        assert_ne!(
            cov.relations[0].inverse, cov.relations[1].inverse,
            "fixture should produce distinct covariances"
        );
    }

    #[test]
    fn score_zero_edges_is_noop() {
        let mut b = GraphBuilder::new();
        b.add_node(0, Role::Anchor, &[0.0]).unwrap();
        b.add_label(0, 0.0, 0);
        let mut g = b.build().unwrap();
        let cov = compute_covariances(&g, None).unwrap();
        score_all_edges(&mut g, &cov, false).unwrap();
        assert!(g.scores_computed());
    }

    // -- WMNC ----------------------------------------------------------------

    /// Graph with two anchors, explicit common neighbors, and manually
    /// written edge scores.
    fn wmnc_fixture(a1_edges: &[(u64, f64)], a2_edges: &[(u64, f64)]) -> TransactionGraph {
        let mut b = GraphBuilder::new();
        b.add_node(0, Role::Anchor, &[0.0]).unwrap();
        b.add_node(1, Role::Anchor, &[0.0]).unwrap();
        let mut seen = std::collections::HashSet::new();
        for &(u, _) in a1_edges.iter().chain(a2_edges) {
            if seen.insert(u) {
                b.add_node(u, Role::Neighbor, &[0.0]).unwrap();
            }
        }
        for &(u, _) in a1_edges {
            b.add_edge(0, u, 0);
        }
        for &(u, _) in a2_edges {
            b.add_edge(1, u, 0);
        }
        b.add_label(0, 0.0, 0);
        b.add_label(1, 0.0, 1);
        let mut g = b.build().unwrap();
        let mut e = 0u32;
        for &(_, s) in a1_edges {
            g.set_edge_score(RelationId(0), e, s);
            e += 1;
        }
        for &(_, s) in a2_edges {
            g.set_edge_score(RelationId(0), e, s);
            e += 1;
        }
        g
    }

    #[test]
    fn wmnc_maximal_similarity() {
        // one common neighbor, both scores 1, both degrees 1
        let g = wmnc_fixture(&[(10, 1.0)], &[(10, 1.0)]);
        let s = wmnc(&g, NodeId(0), NodeId(1)).unwrap();
        assert_eq!(s.value, 1.0);
    }

    #[test]
    fn wmnc_no_common_neighbors_is_zero() {
        let g = wmnc_fixture(&[(10, 1.0)], &[(11, 1.0)]);
        assert_eq!(wmnc(&g, NodeId(0), NodeId(1)).unwrap().value, 0.0);
    }

    #[test]
    fn wmnc_worked_example() {
        // U = {u1, u2}; w(a1,u1)=0.5 w(a2,u1)=0.5 w(a1,u2)=1 w(a2,u2)=1;
        // deg(a1)=2, deg(a2)=3 -> (1/2) * [1.0/(2*2) + 2.0/(2*2)] = 0.375
        let g = wmnc_fixture(
            &[(10, 0.5), (11, 1.0)],
            &[(10, 0.5), (11, 1.0), (12, 0.7)],
        );
        let s = wmnc(&g, NodeId(0), NodeId(1)).unwrap();
        // brute-force oracle, term by term
        let denom = 2.0 * 2.0f64;
        let oracle = ((0.5 + 0.5) / denom + (1.0 + 1.0) / denom) / 2.0;
        assert!((s.value - oracle).abs() < 1e-12);
        assert!((s.value - 0.375).abs() < 1e-12);
    }

    #[test]
    fn wmnc_rejects_non_anchor() {
        let g = wmnc_fixture(&[(10, 1.0)], &[(10, 1.0)]);
        assert!(matches!(
            wmnc(&g, NodeId(0), NodeId(2)),
            Err(SamplerError::NotAnAnchor(_))
        ));
    }

    #[test]
    fn wmnc_requires_scores() {
        let mut b = GraphBuilder::new();
        b.add_node(0, Role::Anchor, &[0.0]).unwrap();
        b.add_node(1, Role::Anchor, &[0.0]).unwrap();
        b.add_node(2, Role::Neighbor, &[0.0]).unwrap();
        b.add_edge(0, 2, 0);
        b.add_edge(1, 2, 0);
        b.add_label(0, 0.0, 0);
        b.add_label(1, 0.0, 1);
        let g = b.build().unwrap();
        assert!(matches!(
            wmnc(&g, NodeId(0), NodeId(1)),
            Err(SamplerError::EdgeScoresMissing)
        ));
    }

    // random bipartite graph with scored edges, for property-style loops
    fn random_scored_graph(rng: &mut ChaCha8Rng, shuffle_ids: bool) -> TransactionGraph {
        let n_anchors = rng.gen_range(2..8);
        let n_neighbors = rng.gen_range(1..12);
        let d = rng.gen_range(1..4);
        let n_rel = rng.gen_range(1..3);
        let mut ids: Vec<u64> = (0..(n_anchors + n_neighbors) as u64).collect();
        if shuffle_ids {
            use rand::seq::SliceRandom;
            ids.shuffle(rng);
        }
        let mut b = GraphBuilder::new();
        for i in 0..n_anchors {
            let f: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            b.add_node(ids[i], Role::Anchor, &f).unwrap();
            b.add_label(ids[i], 0.0, i as i64);
        }
        for i in 0..n_neighbors {
            let f: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            b.add_node(ids[n_anchors + i], Role::Neighbor, &f).unwrap();
        }
        for a in 0..n_anchors {
            for w in 0..n_neighbors {
                if rng.gen_bool(0.4) {
                    b.add_edge(ids[a], ids[n_anchors + w], rng.gen_range(0..n_rel) as u32);
                }
            }
        }
        let mut g = b.build().unwrap();
        let cov = compute_covariances(&g, None).unwrap();
        score_all_edges(&mut g, &cov, false).unwrap();
        g
    }

    #[test]
    fn wmnc_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let g = random_scored_graph(&mut rng, false);
            let anchors = g.anchors();
            for i in 0..anchors.len() {
                for j in (i + 1)..anchors.len() {
                    let s1 = wmnc(&g, anchors[i], anchors[j]).unwrap().value;
                    let s2 = wmnc(&g, anchors[j], anchors[i]).unwrap().value;
                    assert_eq!(s1.to_bits(), s2.to_bits());
                }
            }
        }
    }

    #[test]
    fn wmnc_invariant_under_relabeling() {
        // same structure built under permuted external ids gives the same
        // score for corresponding anchor pairs
        let build = |ids: &[u64]| {
            let mut b = GraphBuilder::new();
            b.add_node(ids[0], Role::Anchor, &[0.1, 0.9]).unwrap();
            b.add_node(ids[1], Role::Anchor, &[-0.3, 0.2]).unwrap();
            b.add_node(ids[2], Role::Neighbor, &[0.5, 0.5]).unwrap();
            b.add_node(ids[3], Role::Neighbor, &[1.5, -0.5]).unwrap();
            b.add_node(ids[4], Role::Neighbor, &[0.0, 1.0]).unwrap();
            b.add_edge(ids[0], ids[2], 0);
            b.add_edge(ids[1], ids[2], 0);
            b.add_edge(ids[0], ids[3], 0);
            b.add_edge(ids[1], ids[3], 0);
            b.add_edge(ids[1], ids[4], 0);
            b.add_label(ids[0], 0.0, 0);
            b.add_label(ids[1], 0.0, 1);
            let mut g = b.build().unwrap();
            let cov = compute_covariances(&g, Some(0.1)).unwrap();
            score_all_edges(&mut g, &cov, false).unwrap();
            let a0 = g.resolve(ids[0]).unwrap();
            let a1 = g.resolve(ids[1]).unwrap();
            wmnc(&g, a0, a1).unwrap().value
        };
        let v1 = build(&[0, 1, 2, 3, 4]);
        let v2 = build(&[40, 17, 99, 3, 21]);
        assert!((v1 - v2).abs() < 1e-15);
    }

    // -- silhouette selection -------------------------------------------------

    /// Naive re-derivation: explicit clusters, explicit averages.
    fn silhouette_oracle(feats: &[Vec<f64>], target: &[f64], k: usize) -> f64 {
        let n = feats.len();
        let mut total = 0.0;
        for j in 0..n {
            let in_cluster = j < k;
            let mut own: Vec<&[f64]> = Vec::new();
            let mut other: Vec<&[f64]> = Vec::new();
            for i in 0..n {
                if i == j {
                    continue;
                }
                if (i < k) == in_cluster {
                    own.push(&feats[i]);
                } else {
                    other.push(&feats[i]);
                }
            }
            if in_cluster {
                own.push(target);
            } else {
                other.push(target);
            }
            if own.is_empty() {
                continue; // singleton
            }
            let a = own.iter().map(|f| euclidean(f, &feats[j])).sum::<f64>() / own.len() as f64;
            let b =
                other.iter().map(|f| euclidean(f, &feats[j])).sum::<f64>() / other.len() as f64;
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
        total / n as f64
    }

    fn select_k_oracle(
        feats: &[Vec<f64>],
        target: &[f64],
        k_min: usize,
        k_max: usize,
    ) -> usize {
        let n = feats.len();
        let k_hi = k_max.min(n - 1);
        let mut best_k = k_min;
        let mut best = f64::NEG_INFINITY;
        for k in k_min..=k_hi {
            let s = silhouette_oracle(feats, target, k);
            if s > best {
                best = s;
                best_k = k;
            }
        }
        best_k
    }

    /// Build a star graph where anchor 0 is the target and candidates carry
    /// the given features in the required WMNC rank order.
    fn ktop_graph(target_feat: &[f64], cand_feats: &[Vec<f64>]) -> (TransactionGraph, Vec<NodeId>) {
        let mut b = GraphBuilder::new();
        b.add_node(0, Role::Anchor, target_feat).unwrap();
        b.add_label(0, 0.0, 0);
        for (i, f) in cand_feats.iter().enumerate() {
            let id = (i + 1) as u64;
            b.add_node(id, Role::Anchor, f).unwrap();
            b.add_label(id, 0.0, id as i64);
        }
        let hub = 1000u64;
        b.add_node(hub, Role::Neighbor, target_feat).unwrap();
        b.add_edge(0, hub, 0);
        for i in 0..cand_feats.len() {
            b.add_edge((i + 1) as u64, hub, 0);
        }
        let g = {
            let mut g = b.build().unwrap();
            for e in 0..g.edge_count(RelationId(0)) as u32 {
                g.set_edge_score(RelationId(0), e, 1.0);
            }
            g
        };
        let ranked: Vec<NodeId> = (1..=cand_feats.len() as u64)
            .map(|id| g.resolve(id).unwrap())
            .collect();
        (g, ranked)
    }

    #[test]
    fn k_top_two_separated_clusters() {
        // 3 tight candidates near the target, 5 in a cluster 30 units away;
        // intra-cluster spread is ~1 so the separation is >= 10x
        let target = vec![0.0, 0.0];
        let mut feats: Vec<Vec<f64>> = vec![
            vec![0.1, 0.2],
            vec![-0.2, 0.1],
            vec![0.2, -0.1],
        ];
        for i in 0..5 {
            feats.push(vec![30.0 + 0.2 * i as f64, 30.0 - 0.3 * i as f64]);
        }
        let (g, ranked) = ktop_graph(&target, &feats);
        let picked = select_k_top(&g, g.resolve(0).unwrap(), &ranked, 1, 64);
        assert_eq!(picked.len(), 3, "silhouette should cut at the cluster edge");
        assert_eq!(picked, ranked[..3].to_vec());
        assert_eq!(select_k_oracle(&feats, &target, 1, 64), 3);
    }

    #[test]
    fn k_top_single_candidate_returned_as_is() {
        let (g, ranked) = ktop_graph(&[0.0], &[vec![1.0]]);
        let picked = select_k_top(&g, g.resolve(0).unwrap(), &ranked, 1, 64);
        assert_eq!(picked, ranked);
    }

    #[test]
    fn k_top_empty_candidates() {
        let (g, _) = ktop_graph(&[0.0], &[vec![1.0]]);
        let picked = select_k_top(&g, g.resolve(0).unwrap(), &[], 1, 64);
        assert!(picked.is_empty());
    }

    #[test]
    fn k_top_identical_features_degenerate_to_k_min() {
        let feats = vec![vec![1.0, 1.0]; 6];
        let (g, ranked) = ktop_graph(&[1.0, 1.0], &feats);
        let picked = select_k_top(&g, g.resolve(0).unwrap(), &ranked, 1, 64);
        assert_eq!(picked.len(), 1, "all-zero silhouettes tie-break to k_min");
    }

    #[test]
    fn k_top_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..100 {
            let n = rng.gen_range(2..=20);
            let d = rng.gen_range(1..4);
            let target: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let feats: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let (g, ranked) = ktop_graph(&target, &feats);
            let picked = select_k_top(&g, g.resolve(0).unwrap(), &ranked, 1, 64);
            let oracle_k = select_k_oracle(&feats, &target, 1, 64);
            assert_eq!(picked.len(), oracle_k);
            assert_eq!(picked, ranked[..oracle_k].to_vec());
        }
    }

    // -- full sampling ---------------------------------------------------------

    /// Two-cluster sampling fixture: 4 candidates structurally and
    /// feature-wise close to the target, 6 far.
    fn sampling_fixture() -> TransactionGraph {
        let mut b = GraphBuilder::new();
        b.add_node(0, Role::Anchor, &[0.0, 0.0]).unwrap();
        b.add_label(0, 0.0, 0);
        // near candidates 1..=4 share a dedicated hub with high scores
        for i in 1..=4u64 {
            b.add_node(i, Role::Anchor, &[0.1 * i as f64, 0.0]).unwrap();
            b.add_label(i, 0.0, i as i64);
        }
        // far candidates 5..=10
        for i in 5..=10u64 {
            b.add_node(i, Role::Anchor, &[50.0 + i as f64, 40.0]).unwrap();
            b.add_label(i, 0.0, i as i64);
        }
        b.add_node(100, Role::Neighbor, &[0.0, 0.1]).unwrap(); // near hub
        b.add_node(101, Role::Neighbor, &[20.0, 20.0]).unwrap(); // far hub
        b.add_edge(0, 100, 0);
        b.add_edge(0, 101, 0);
        for i in 1..=4u64 {
            b.add_edge(i, 100, 0);
        }
        for i in 5..=10u64 {
            b.add_edge(i, 101, 0);
        }
        let mut g = b.build().unwrap();
        let cov = compute_covariances(&g, None).unwrap();
        score_all_edges(&mut g, &cov, false).unwrap();
        g
    }

    #[test]
    fn sample_epsilon_zero_has_no_random_augment() {
        let g = sampling_fixture();
        let cov = compute_covariances(&g, None).unwrap();
        let s = sample_neighborhood(&g, NodeId(0), 0.0, 7, &cov).unwrap();
        assert!(s.n_random.is_empty());
        assert!(!s.k_top.is_empty());
    }

    #[test]
    fn sample_epsilon_one_takes_every_candidate() {
        let g = sampling_fixture();
        let cov = compute_covariances(&g, None).unwrap();
        let s = sample_neighborhood(&g, NodeId(0), 1.0, 7, &cov).unwrap();
        let covered = s.k_top.len() + s.n_random.len();
        assert_eq!(covered, 10, "k_top plus all remaining candidates");
    }

    #[test]
    fn sample_half_epsilon_set_arithmetic() {
        let g = sampling_fixture();
        let cov = compute_covariances(&g, None).unwrap();
        let s = sample_neighborhood(&g, NodeId(0), 0.5, 7, &cov).unwrap();
        assert_eq!(s.k_top.len(), 4, "silhouette should select the near cluster");
        // enumeration oracle: remainder 6, round(0.5 * 6) = 3
        assert_eq!(s.n_random.len(), 3);
        for c in &s.n_random {
            assert!(!s.k_top.contains(c));
        }
        let again = sample_neighborhood(&g, NodeId(0), 0.5, 7, &cov).unwrap();
        assert_eq!(s.n_random, again.n_random);
        let other_seed = sample_neighborhood(&g, NodeId(0), 0.5, 8, &cov).unwrap();
        assert_eq!(other_seed.n_random.len(), 3);
    }

    #[test]
    fn sample_rejects_non_anchor_target() {
        let g = sampling_fixture();
        let cov = compute_covariances(&g, None).unwrap();
        let hub = g.resolve(100).unwrap();
        assert!(matches!(
            sample_neighborhood(&g, hub, 0.2, 7, &cov),
            Err(SamplerError::NotAnAnchor(_))
        ));
    }

    #[test]
    fn round_half_up_rule() {
        assert_eq!(round_half_up(0.0), 0);
        assert_eq!(round_half_up(0.49), 0);
        assert_eq!(round_half_up(0.5), 1);
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(3.0), 3);
    }

    #[test]
    fn subgraph_invariants_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for trial in 0..1000 {
            let g = random_scored_graph(&mut rng, trial % 3 == 0);
            let opts = SamplerOptions {
                epsilon: [0.0, 0.3, 1.0][trial % 3],
                seed: trial as u64,
                ..Default::default()
            };
            let sampler = Sampler::new(&g, opts.clone()).unwrap();
            for &target in g.anchors() {
                let s = sampler.sample(target).unwrap();
                // disjointness and self-exclusion
                for c in &s.n_random {
                    assert!(!s.k_top.contains(c));
                }
                assert!(!s.k_top.contains(&target));
                assert!(!s.n_random.contains(&target));
                // membership in the capped two-hop set
                let two_hop = g.two_hop_anchors(target).unwrap();
                for c in s.k_top.iter().chain(&s.n_random) {
                    assert!(two_hop.contains(c));
                }
                // closure is exactly the one-hop neighbors of the anchors
                let mut expect: Vec<NodeId> = s
                    .anchor_set()
                    .iter()
                    .flat_map(|&a| g.undersample_hypernode(a, opts.hypernode_cap, opts.seed))
                    .collect();
                expect.sort_unstable();
                expect.dedup();
                assert_eq!(s.neighbor_closure, expect);
                // determinism
                let s2 = sampler.sample(target).unwrap();
                assert_eq!(s.k_top, s2.k_top);
                assert_eq!(s.n_random, s2.n_random);
                assert_eq!(s.neighbor_closure, s2.neighbor_closure);
            }
        }
    }

    #[test]
    fn solo_mode_uses_every_candidate_for_both_paths() {
        let g = sampling_fixture();
        let sampler = Sampler::new(
            &g,
            SamplerOptions {
                mode: SamplerMode::AllCandidates,
                ..Default::default()
            },
        )
        .unwrap();
        let s = sampler.sample(NodeId(0)).unwrap();
        assert_eq!(s.k_top.len(), 10);
        assert_eq!(s.n_random.len(), 10);
    }

    #[test]
    fn anchor_filter_restricts_candidates() {
        let g = sampling_fixture();
        let allowed: HashSet<NodeId> = [1, 2, 5]
            .iter()
            .map(|&id| g.resolve(id).unwrap())
            .collect();
        let sampler = Sampler::new(
            &g,
            SamplerOptions {
                anchor_filter: Some(allowed.clone()),
                epsilon: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        let s = sampler.sample(NodeId(0)).unwrap();
        for c in s.k_top.iter().chain(&s.n_random) {
            assert!(allowed.contains(c));
        }
        assert_eq!(s.k_top.len() + s.n_random.len(), 3);
    }
}
