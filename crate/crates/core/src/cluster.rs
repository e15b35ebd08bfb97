//! Community detection for cluster-batched training: single-level Louvain
//! modularity optimization plus external cluster-file import.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};

/// Node-to-cluster assignment with dense cluster ids.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub cluster_of: Vec<u32>,
    pub cluster_count: usize,
    pub cluster_sizes: Vec<usize>,
}

impl ClusterAssignment {
    pub fn from_raw(raw: Vec<u32>) -> Self {
        let mut remap: HashMap<u32, u32> = HashMap::new();
        let mut cluster_of = Vec::with_capacity(raw.len());
        for &c in &raw {
            let next = remap.len() as u32;
            let dense = *remap.entry(c).or_insert(next);
            cluster_of.push(dense);
        }
        let cluster_count = remap.len();
        let mut cluster_sizes = vec![0usize; cluster_count];
        for &c in &cluster_of {
            cluster_sizes[c as usize] += 1;
        }
        Self {
            cluster_of,
            cluster_count,
            cluster_sizes,
        }
    }

    pub fn members(&self, cluster: u32) -> Vec<NodeId> {
        self.cluster_of
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(v, _)| v as NodeId)
            .collect()
    }
}

/// Undirected weighted view used for modularity: weights of both stored
/// directions are pooled per unordered pair, self-loops ignored.
struct UndirectedView {
    adj: Vec<Vec<(NodeId, f64)>>,
    strength: Vec<f64>,
    two_m: f64,
}

impl UndirectedView {
    fn build(graph: &Graph) -> Self {
        let n = graph.num_nodes;
        let mut pooled: HashMap<(NodeId, NodeId), f64> = HashMap::new();
        for (eid, &(s, d)) in graph.edges.iter().enumerate() {
            if s == d {
                continue;
            }
            let key = (s.min(d), s.max(d));
            *pooled.entry(key).or_insert(0.0) += graph.edge_weights[eid] as f64;
        }
        let mut adj = vec![Vec::new(); n];
        let mut strength = vec![0.0; n];
        let mut two_m = 0.0;
        for (&(u, v), &w) in &pooled {
            adj[u as usize].push((v, w));
            adj[v as usize].push((u, w));
            strength[u as usize] += w;
            strength[v as usize] += w;
            two_m += 2.0 * w;
        }
        for list in &mut adj {
            list.sort_unstable_by_key(|&(v, _)| v);
        }
        Self {
            adj,
            strength,
            two_m,
        }
    }
}

/// Modularity of an assignment over the pooled undirected view.
pub fn modularity(graph: &Graph, assignment: &[u32]) -> f64 {
    let view = UndirectedView::build(graph);
    modularity_view(&view, assignment)
}

fn modularity_view(view: &UndirectedView, assignment: &[u32]) -> f64 {
    if view.two_m == 0.0 {
        return 0.0;
    }
    let mut internal: HashMap<u32, f64> = HashMap::new();
    let mut total: HashMap<u32, f64> = HashMap::new();
    for (u, list) in view.adj.iter().enumerate() {
        let cu = assignment[u];
        *total.entry(cu).or_insert(0.0) += view.strength[u];
        for &(v, w) in list {
            if assignment[v as usize] == cu {
                *internal.entry(cu).or_insert(0.0) += w; // counted twice overall
            }
        }
    }
    let mut q = 0.0;
    for (&c, &tot) in &total {
        let inside = internal.get(&c).copied().unwrap_or(0.0);
        q += inside / view.two_m - (tot / view.two_m).powi(2);
    }
    q
}

/// Single-level Louvain: nodes are swept in a seeded fixed permutation and
/// moved to the neighboring community with the largest positive modularity
/// gain, until a full sweep makes no move. No coarsening recursion.
pub fn cluster_louvain(graph: &Graph, seed: u64) -> ClusterAssignment {
    let n = graph.num_nodes;
    let view = UndirectedView::build(graph);
    let mut comm: Vec<u32> = (0..n as u32).collect();
    if view.two_m == 0.0 {
        return ClusterAssignment::from_raw(comm);
    }
    let mut comm_total: Vec<f64> = view.strength.clone();

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let two_m = view.two_m;
    let mut last_q = modularity_view(&view, &comm);
    loop {
        let mut moved = false;
        for &v in &order {
            let cv = comm[v];
            let kv = view.strength[v];
            // Weights from v to each neighboring community.
            let mut to_comm: HashMap<u32, f64> = HashMap::new();
            for &(u, w) in &view.adj[v] {
                *to_comm.entry(comm[u as usize]).or_insert(0.0) += w;
            }
            // Remove v from its community for the gain comparison.
            comm_total[cv as usize] -= kv;
            let w_own = to_comm.get(&cv).copied().unwrap_or(0.0);
            let gain_stay = w_own - kv * comm_total[cv as usize] / two_m;
            let mut best = (cv, gain_stay);
            let mut candidates: Vec<(&u32, &f64)> = to_comm.iter().collect();
            candidates.sort_unstable_by_key(|(c, _)| **c);
            for (&c, &w) in candidates {
                if c == cv {
                    continue;
                }
                let gain = w - kv * comm_total[c as usize] / two_m;
                if gain > best.1 + 1e-12 {
                    best = (c, gain);
                }
            }
            comm_total[best.0 as usize] += kv;
            if best.0 != cv {
                comm[v] = best.0;
                moved = true;
            }
        }
        let q = modularity_view(&view, &comm);
        debug_assert!(
            q + 1e-9 >= last_q,
            "modularity decreased across sweep: {last_q} -> {q}"
        );
        last_q = q;
        if !moved {
            break;
        }
    }
    ClusterAssignment::from_raw(comm)
}

/// Loads `node_id  cluster_id` lines covering all nodes; non-dense cluster
/// ids are re-densified with a warning.
pub fn load_clusters(path: impl AsRef<Path>, num_nodes: usize) -> Result<ClusterAssignment> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut raw = vec![u32::MAX; num_nodes];
    let mut seen = vec![false; num_nodes];
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CoreError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |msg: &str| CoreError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: msg.into(),
        };
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(err("expected `node_id cluster_id`"));
        }
        let v: usize = fields[0].parse().map_err(|_| err("bad node id"))?;
        let c: u32 = fields[1].parse().map_err(|_| err("bad cluster id"))?;
        if v >= num_nodes {
            return Err(CoreError::NodeRange {
                id: v as u64,
                bound: num_nodes as u64,
            });
        }
        seen[v] = true;
        raw[v] = c;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(CoreError::Config(format!(
            "cluster file missing node {missing}"
        )));
    }
    let max = raw.iter().max().copied().unwrap_or(0);
    let distinct: std::collections::HashSet<u32> = raw.iter().copied().collect();
    if (max as usize + 1) != distinct.len() {
        log::warn!(
            "cluster ids not dense (max {max}, {} distinct); re-densifying",
            distinct.len()
        );
    }
    Ok(ClusterAssignment::from_raw(raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::io::Write as _;

    fn unit_graph(n: usize, pairs: &[(NodeId, NodeId)]) -> Graph {
        // Store both directions.
        let mut edges = Vec::new();
        for &(a, b) in pairs {
            edges.push((a, b));
            edges.push((b, a));
        }
        let m = edges.len();
        Graph::from_edges(
            n,
            edges,
            vec![1.0; m],
            None,
            Tensor::zeros(n, 1),
            vec![None; n],
        )
        .unwrap()
    }

    /// Enumerates all set partitions of n elements (restricted growth
    /// strings) and returns the one with maximum modularity.
    fn brute_force_best(graph: &Graph, n: usize) -> (Vec<u32>, f64) {
        let mut best = (vec![0u32; n], f64::NEG_INFINITY);
        let mut current = vec![0u32; n];
        fn recurse(
            graph: &Graph,
            current: &mut Vec<u32>,
            idx: usize,
            max_used: u32,
            best: &mut (Vec<u32>, f64),
        ) {
            let n = current.len();
            if idx == n {
                let q = modularity(graph, current);
                if q > best.1 {
                    *best = (current.clone(), q);
                }
                return;
            }
            for c in 0..=max_used + 1 {
                current[idx] = c;
                recurse(graph, current, idx + 1, max_used.max(c), best);
            }
        }
        // Fix element 0 to cluster 0 (canonical form).
        current[0] = 0;
        recurse(graph, &mut current, 1, 0, &mut best);
        if n == 1 {
            best = (vec![0], modularity(graph, &[0]));
        }
        best
    }

    fn groups(assignment: &[u32]) -> Vec<Vec<usize>> {
        let max = assignment.iter().max().copied().unwrap_or(0) as usize;
        let mut g = vec![Vec::new(); max + 1];
        for (v, &c) in assignment.iter().enumerate() {
            g[c as usize].push(v);
        }
        g.retain(|x| !x.is_empty());
        g.sort();
        g
    }

    #[test]
    fn two_triangles_split_into_two_clusters() {
        let g = unit_graph(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]);
        let got = cluster_louvain(&g, 7);
        assert_eq!(got.cluster_count, 2);
        assert_eq!(
            groups(&got.cluster_of),
            vec![vec![0, 1, 2], vec![3, 4, 5]]
        );
        // Brute force over all 203 partitions confirms this is the optimum.
        let (best, best_q) = brute_force_best(&g, 6);
        assert_eq!(groups(&best), groups(&got.cluster_of));
        assert!((modularity(&g, &got.cluster_of) - best_q).abs() < 1e-12);
    }

    #[test]
    fn complete_graph_is_one_cluster() {
        let mut pairs = Vec::new();
        for a in 0..4u32 {
            for b in (a + 1)..4 {
                pairs.push((a, b));
            }
        }
        let g = unit_graph(4, &pairs);
        let got = cluster_louvain(&g, 3);
        assert_eq!(got.cluster_count, 1);
        // Enumeration: every split has non-positive gain over one cluster.
        let (_, best_q) = brute_force_best(&g, 4);
        assert!((modularity(&g, &got.cluster_of) - best_q).abs() < 1e-12);
    }

    #[test]
    fn empty_graph_gives_singletons() {
        let g = unit_graph(5, &[]);
        let got = cluster_louvain(&g, 1);
        assert_eq!(got.cluster_count, 5);
        assert_eq!(got.cluster_sizes, vec![1; 5]);
    }

    #[test]
    fn result_beats_singletons() {
        let g = unit_graph(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3), (2, 3)]);
        let singles: Vec<u32> = (0..6).collect();
        let got = cluster_louvain(&g, 11);
        assert!(modularity(&g, &got.cluster_of) >= modularity(&g, &singles));
    }

    #[test]
    fn heavy_weights_pull_the_partition() {
        // A 4-cycle with two heavy opposite edges: the optimum pairs the
        // heavy endpoints, and the weighted brute force agrees.
        let edges = [
            (0, 1, 10.0),
            (1, 0, 10.0),
            (2, 3, 10.0),
            (3, 2, 10.0),
            (1, 2, 1.0),
            (2, 1, 1.0),
            (3, 0, 1.0),
            (0, 3, 1.0),
        ];
        let g = Graph::from_edges(
            4,
            edges.iter().map(|&(a, b, _)| (a, b)).collect(),
            edges.iter().map(|&(_, _, w)| w).collect(),
            None,
            Tensor::zeros(4, 1),
            vec![None; 4],
        )
        .unwrap();
        let got = cluster_louvain(&g, 2);
        assert_eq!(groups(&got.cluster_of), vec![vec![0, 1], vec![2, 3]]);
        let (best, _) = brute_force_best(&g, 4);
        assert_eq!(groups(&best), groups(&got.cluster_of));
    }

    #[test]
    fn louvain_is_seed_deterministic() {
        let g = unit_graph(
            8,
            &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3), (2, 3), (6, 7)],
        );
        let a = cluster_louvain(&g, 5);
        let b = cluster_louvain(&g, 5);
        assert_eq!(a.cluster_of, b.cluster_of);
    }

    #[test]
    fn cluster_file_round_trips_and_densifies() {
        let dir = tempfile::TempDir::new().unwrap();
        let p = dir.path().join("c.tsv");
        let mut f = File::create(&p).unwrap();
        writeln!(f, "0\t0\n1\t2\n2\t2").unwrap();
        let a = load_clusters(&p, 3).unwrap();
        assert_eq!(a.cluster_count, 2);
        assert_eq!(a.cluster_of, vec![0, 1, 1]);
    }

    #[test]
    fn all_zero_file_is_one_cluster() {
        let dir = tempfile::TempDir::new().unwrap();
        let p = dir.path().join("c.tsv");
        let mut f = File::create(&p).unwrap();
        writeln!(f, "0\t0\n1\t0\n2\t0").unwrap();
        let a = load_clusters(&p, 3).unwrap();
        assert_eq!(a.cluster_count, 1);
    }

    #[test]
    fn missing_node_is_named_in_error() {
        let dir = tempfile::TempDir::new().unwrap();
        let p = dir.path().join("c.tsv");
        let mut f = File::create(&p).unwrap();
        writeln!(f, "0\t0\n1\t0\n2\t0\n3\t1\n4\t1").unwrap();
        let err = load_clusters(&p, 6).unwrap_err();
        assert!(err.to_string().contains('5'), "{err}");
    }
}
