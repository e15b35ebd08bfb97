//! Seeded synthetic dataset generators for tests and benchmarks.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::ClusterAssignment;
use crate::graph::{DatasetBundle, Graph, NodeId};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct RandomGraphSpec {
    pub nodes: usize,
    /// Directed edge count (approximate when `symmetric`).
    pub edges: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub seed: u64,
    pub symmetric: bool,
}

fn split_masks(
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<NodeId>, Vec<NodeId>, Vec<NodeId>) {
    let mut ids: Vec<NodeId> = (0..n as NodeId).collect();
    ids.shuffle(rng);
    let train_end = (n * 6) / 10;
    let val_end = (n * 8) / 10;
    let mut train: Vec<NodeId> = ids[..train_end.max(1)].to_vec();
    let mut val: Vec<NodeId> = ids[train_end.max(1)..val_end.max(2).min(n)].to_vec();
    let mut test: Vec<NodeId> = ids[val_end.max(2).min(n)..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    (train, val, test)
}

/// Random attributed graph with uniform features and labels.
pub fn random_bundle(spec: &RandomGraphSpec) -> DatasetBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.nodes;
    let mut set: HashSet<(NodeId, NodeId)> = HashSet::new();
    let mut edges: Vec<(NodeId, NodeId)> = Vec::new();
    let target = spec.edges;
    let mut guard = 0;
    while edges.len() < target && guard < target * 50 {
        guard += 1;
        let s = rng.gen_range(0..n) as NodeId;
        let d = rng.gen_range(0..n) as NodeId;
        if s == d {
            continue;
        }
        if set.insert((s, d)) {
            edges.push((s, d));
            // Symmetric mode always stores the pair, even when that
            // overshoots the requested count by one.
            if spec.symmetric && set.insert((d, s)) {
                edges.push((d, s));
            }
        }
    }
    let m = edges.len();
    let features = Tensor::from_vec(
        n,
        spec.feature_dim,
        (0..n * spec.feature_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    );
    let labels: Vec<Option<u32>> = (0..n)
        .map(|_| Some(rng.gen_range(0..spec.classes) as u32))
        .collect();
    let graph = Graph::from_edges(n, edges, vec![1.0; m], None, features, labels).unwrap();
    let (train, val, test) = split_masks(n, &mut rng);
    DatasetBundle {
        graph,
        train_mask: train,
        validation_mask: val,
        test_mask: test,
        class_count: spec.classes,
    }
}

#[derive(Debug, Clone)]
pub struct CommunitySpec {
    /// Nodes per community.
    pub per_community: usize,
    pub communities: usize,
    /// Intra-community out-edges per node.
    pub intra_degree: usize,
    /// Total bridge pairs between consecutive communities.
    pub bridges: usize,
    pub feature_dim: usize,
    pub feature_noise: Real,
    pub seed: u64,
}

/// Planted-community graph: dense blocks, sparse bridges, class = community,
/// features = one-hot class signal plus noise. Returns the ground-truth
/// clustering alongside the dataset.
pub fn community_bundle(spec: &CommunitySpec) -> (DatasetBundle, ClusterAssignment) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.per_community * spec.communities;
    let block_of = |v: usize| v / spec.per_community;
    let mut set: HashSet<(NodeId, NodeId)> = HashSet::new();
    let mut edges: Vec<(NodeId, NodeId)> = Vec::new();
    let push_undirected = |set: &mut HashSet<(NodeId, NodeId)>,
                               edges: &mut Vec<(NodeId, NodeId)>,
                               a: NodeId,
                               b: NodeId| {
        if a != b && set.insert((a, b)) {
            edges.push((a, b));
            set.insert((b, a));
            edges.push((b, a));
        }
    };
    for v in 0..n {
        let block = block_of(v);
        let base = block * spec.per_community;
        let mut added = 0;
        let mut guard = 0;
        while added < spec.intra_degree && guard < 100 {
            guard += 1;
            let u = base + rng.gen_range(0..spec.per_community);
            if u == v {
                continue;
            }
            let before = edges.len();
            push_undirected(&mut set, &mut edges, v as NodeId, u as NodeId);
            if edges.len() > before {
                added += 1;
            }
        }
    }
    for b in 0..spec.bridges {
        let c1 = b % spec.communities;
        let c2 = (b + 1) % spec.communities;
        let v = c1 * spec.per_community + rng.gen_range(0..spec.per_community);
        let u = c2 * spec.per_community + rng.gen_range(0..spec.per_community);
        push_undirected(&mut set, &mut edges, v as NodeId, u as NodeId);
    }

    let d = spec.feature_dim.max(spec.communities);
    let mut features = Tensor::zeros(n, d);
    for v in 0..n {
        let row = features.row_mut(v);
        for x in row.iter_mut() {
            *x = rng.gen_range(-1.0..1.0) * spec.feature_noise;
        }
        row[block_of(v)] += 1.0;
    }
    let labels: Vec<Option<u32>> = (0..n).map(|v| Some(block_of(v) as u32)).collect();
    let m = edges.len();
    let graph = Graph::from_edges(n, edges, vec![1.0; m], None, features, labels).unwrap();
    let (train, val, test) = split_masks(n, &mut rng);
    let bundle = DatasetBundle {
        graph,
        train_mask: train,
        validation_mask: val,
        test_mask: test,
        class_count: spec.communities,
    };
    let truth = ClusterAssignment::from_raw((0..n).map(|v| block_of(v) as u32).collect());
    (bundle, truth)
}

/// Random graph with edge features attached, for edge-attention tests.
pub fn random_edge_featured_bundle(spec: &RandomGraphSpec, edge_dim: usize) -> DatasetBundle {
    let mut bundle = random_bundle(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xedef);
    let m = bundle.graph.num_edges;
    bundle.graph.edge_features = Some(Tensor::from_vec(
        m,
        edge_dim,
        (0..m * edge_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    ));
    bundle
}
