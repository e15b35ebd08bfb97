//! Logical subgraphs over the global storage.
//!
//! A view is defined by its target set, a per-node minimal layer depth, and
//! a local vertex-id map; adjacency lookups always go through the global
//! CSR/CSC indices. Construction is a breadth-first traversal over in-edges
//! from the targets (K levels), so each reached node is assigned only the
//! layers it actually feeds. Cluster-batch targets are cluster members; the
//! traversal collects exactly their K-hop boundary nodes and edges.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{EdgeId, Graph, NodeId};

/// Per-level fan-in caps for random neighbor sampling. `fanouts[d]` bounds
/// the sampled in-edges of a node first reached at BFS depth `d`.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub fanouts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GraphView {
    /// Batch targets, ascending.
    pub targets: Vec<NodeId>,
    /// All nodes reached by the traversal, ascending.
    pub active: Vec<NodeId>,
    /// Dense per-node map: highest layer whose output this node computes
    /// (K for targets, K - depth otherwise), or -1 when outside the view.
    pub max_layer: Vec<i16>,
    /// Dense global-to-local map into `active`, or -1.
    pub local_index: Vec<i32>,
    /// Encoding layer count K.
    pub layer_count: usize,
    /// Per-destination sampled in-edge ids (ascending); `None` = no sampling
    /// (all stored in-edges participate).
    pub sampled_in: Option<HashMap<NodeId, Vec<EdgeId>>>,
}

impl GraphView {
    pub fn is_active(&self, v: NodeId) -> bool {
        self.max_layer[v as usize] >= 0
    }

    /// Does `v` produce h^k (run accumulate/apply) at layer `k`?
    pub fn apply_active(&self, v: NodeId, k: usize) -> bool {
        self.max_layer[v as usize] >= k as i16
    }

    /// Does `v` produce n^k (run the projection) at layer `k`? True when it
    /// holds h^{k-1}, i.e. one level beyond its apply range.
    pub fn transform_active(&self, v: NodeId, k: usize) -> bool {
        self.max_layer[v as usize] >= k as i16 - 1
    }

    /// Is the stored edge part of layer k's gather?
    pub fn edge_active(&self, eid: EdgeId, src: NodeId, dst: NodeId, k: usize) -> bool {
        if !self.apply_active(dst, k) || !self.transform_active(src, k) {
            return false;
        }
        match &self.sampled_in {
            None => true,
            Some(map) => map
                .get(&dst)
                .is_some_and(|ids| ids.binary_search(&eid).is_ok()),
        }
    }

    /// Number of active in-edges feeding `v` at layer `k` (mean-aggregation
    /// denominator under view-local semantics).
    pub fn active_in_count(&self, graph: &Graph, v: NodeId, k: usize) -> usize {
        let (sources, ids) = graph.csc.row(v);
        sources
            .iter()
            .zip(ids)
            .filter(|(&s, &e)| self.edge_active(e, s, v, k))
            .count()
    }

    pub fn node_count(&self) -> usize {
        self.active.len()
    }
}

/// Breadth-first K-hop view construction from `targets` over in-edges, with
/// optional per-level fan-in sampling.
pub fn build_view(
    graph: &Graph,
    targets: &[NodeId],
    layer_count: usize,
    sampler: Option<&SamplerConfig>,
    seed: u64,
) -> GraphView {
    assert!(layer_count >= 1, "K must be at least 1");
    let n = graph.num_nodes;
    let mut max_layer = vec![-1i16; n];
    let mut sampled: Option<HashMap<NodeId, Vec<EdgeId>>> =
        sampler.map(|_| HashMap::new());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut targets_sorted = targets.to_vec();
    targets_sorted.sort_unstable();
    targets_sorted.dedup();

    let mut frontier: Vec<NodeId> = targets_sorted.clone();
    for &t in &frontier {
        max_layer[t as usize] = layer_count as i16;
    }
    for depth in 0..layer_count {
        let mut next: Vec<NodeId> = Vec::new();
        for &v in &frontier {
            let (sources, ids) = graph.csc.row(v);
            let chosen: Vec<(NodeId, EdgeId)> = match sampler {
                None => sources.iter().copied().zip(ids.iter().copied()).collect(),
                Some(cfg) => {
                    let cap = cfg
                        .fanouts
                        .get(depth)
                        .copied()
                        .unwrap_or(usize::MAX);
                    let mut pairs: Vec<(NodeId, EdgeId)> =
                        sources.iter().copied().zip(ids.iter().copied()).collect();
                    if pairs.len() > cap {
                        pairs = pairs
                            .choose_multiple(&mut rng, cap)
                            .copied()
                            .collect();
                    }
                    let mut ids_only: Vec<EdgeId> = pairs.iter().map(|&(_, e)| e).collect();
                    ids_only.sort_unstable();
                    sampled.as_mut().unwrap().insert(v, ids_only);
                    pairs
                }
            };
            for (src, _) in chosen {
                if max_layer[src as usize] < 0 {
                    max_layer[src as usize] = (layer_count - depth - 1) as i16;
                    next.push(src);
                }
            }
        }
        next.sort_unstable();
        next.dedup();
        frontier = next;
    }

    let mut active: Vec<NodeId> = (0..n as NodeId)
        .filter(|&v| max_layer[v as usize] >= 0)
        .collect();
    active.sort_unstable();
    let mut local_index = vec![-1i32; n];
    for (i, &v) in active.iter().enumerate() {
        local_index[v as usize] = i as i32;
    }
    GraphView {
        targets: targets_sorted,
        active,
        max_layer,
        local_index,
        layer_count,
        sampled_in: sampled,
    }
}
