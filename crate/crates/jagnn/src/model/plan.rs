//! Batch plan: the index structure one forward/backward pass runs over.
//!
//! Starting from the batch targets, the builder walks `k_top` links outward
//! (plus each target's `n_random` anchors for the jump path), assigns every
//! reached anchor a slot, and freezes per-relation edge lists. Sampling is
//! done once per anchor and reused across layers; anchors past the
//! extraction depth are not expanded and aggregate over their self edge
//! only.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use crate::graphstore::{NodeId, RelationId, TransactionGraph};
use crate::sampler::{SampleCache, SamplerError};

/// Attention edges for one relation, grouped contiguously by destination.
#[derive(Debug, Clone, Default)]
pub struct RelationPlan {
    /// Aggregation destination slot per edge.
    pub dst: Vec<usize>,
    /// Message source slot per edge (first edge of each group is the self
    /// edge).
    pub src: Vec<usize>,
    /// Dense softmax group id per edge; one group per participating
    /// destination.
    pub seg: Vec<usize>,
    pub n_groups: usize,
}

/// Jump-path membership for one relation: mean of `src` rows per target.
#[derive(Debug, Clone, Default)]
pub struct JumpPlan {
    pub src: Vec<usize>,
    /// Index into the batch target list.
    pub target: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BatchPlan {
    /// Active anchors, ascending id; position is the slot index.
    pub anchors: Vec<NodeId>,
    /// Slot of each batch target, in batch order.
    pub target_slots: Vec<usize>,
    pub targets: Vec<NodeId>,
    pub relations: Vec<RelationPlan>,
    pub jump: Vec<JumpPlan>,
}

impl BatchPlan {
    /// Walk sampled neighborhoods out of `targets` and freeze the batch
    /// index structure. `anchor_hop_limit` is the extraction depth in
    /// anchor hops (total bipartite depth / 2).
    pub fn build(
        graph: &TransactionGraph,
        cache: &mut SampleCache<'_>,
        targets: &[NodeId],
        n_layers: usize,
        anchor_hop_limit: usize,
    ) -> Result<Self, SamplerError> {
        let limit = n_layers.min(anchor_hop_limit);
        let mut hops: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut queue: VecDeque<NodeId> = VecDeque::new();
        for &t in targets {
            if hops.insert(t, 0).is_none() {
                queue.push_back(t);
            }
        }
        // jump anchors of each target enter at hop 1
        for &t in targets {
            let sub = cache.get(t)?;
            for &u in &sub.n_random {
                if !hops.contains_key(&u) {
                    hops.insert(u, 1);
                    queue.push_back(u);
                }
            }
        }
        while let Some(v) = queue.pop_front() {
            let h = hops[&v];
            if h >= limit {
                continue;
            }
            let sub = cache.get(v)?;
            for &u in &sub.k_top {
                if !hops.contains_key(&u) {
                    hops.insert(u, h + 1);
                    queue.push_back(u);
                }
            }
        }

        let anchors: Vec<NodeId> = hops.keys().copied().collect();
        let slot_of: HashMap<NodeId, usize> =
            anchors.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        let target_slots: Vec<usize> = targets.iter().map(|t| slot_of[t]).collect();

        let n_relations = graph.relation_count();
        let mut relations = vec![RelationPlan::default(); n_relations];
        for (slot, &v) in anchors.iter().enumerate() {
            let expanded = hops[&v] < limit;
            let members = if expanded { Some(cache.get(v)?) } else { None };
            let isolated = graph.degree(v) == 0;
            for (r, plan) in relations.iter_mut().enumerate() {
                let participates = isolated || graph.degree_in(v, RelationId(r as u32)) > 0;
                if !participates {
                    continue;
                }
                let group = plan.n_groups;
                plan.n_groups += 1;
                plan.dst.push(slot);
                plan.src.push(slot); // self edge first
                plan.seg.push(group);
                if let Some(sub) = &members {
                    let mut member_slots: Vec<usize> = sub
                        .k_top
                        .iter()
                        .filter(|u| sub.relation_links.get(u).copied().unwrap_or(0) & (1 << r) != 0)
                        .map(|u| slot_of[u])
                        .collect();
                    member_slots.sort_unstable();
                    for s in member_slots {
                        plan.dst.push(slot);
                        plan.src.push(s);
                        plan.seg.push(group);
                    }
                }
            }
        }

        let mut jump = vec![JumpPlan::default(); n_relations];
        for (ti, &t) in targets.iter().enumerate() {
            let sub = cache.get(t)?;
            for (r, plan) in jump.iter_mut().enumerate() {
                for u in &sub.n_random {
                    if sub.relation_links.get(u).copied().unwrap_or(0) & (1 << r) != 0 {
                        plan.src.push(slot_of[u]);
                        plan.target.push(ti);
                    }
                }
            }
        }

        Ok(Self {
            anchors,
            target_slots,
            targets: targets.to_vec(),
            relations,
            jump,
        })
    }

    /// Anchors outside this set never enter the computation; used to assert
    /// split confinement during training.
    pub fn active_set(&self) -> HashSet<NodeId> {
        self.anchors.iter().copied().collect()
    }
}
