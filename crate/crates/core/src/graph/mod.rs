//! Global attributed graph storage with dual CSR/CSC indexing.

pub mod io;

use crate::error::{CoreError, Result};
use crate::tensor::{Real, Tensor};

pub type NodeId = u32;
pub type EdgeId = u32;

/// One adjacency direction: row offsets into `(neighbor, edge id)` pairs.
///
/// For the outgoing index (CSR) rows are sources and neighbors are
/// destinations; for the incoming index (CSC) rows are destinations and
/// neighbors are sources. Neighbor lists are ascending by neighbor id with
/// ties broken by edge id.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjIndex {
    pub offsets: Vec<usize>,
    pub neighbors: Vec<NodeId>,
    pub edge_ids: Vec<EdgeId>,
}

impl AdjIndex {
    pub fn degree(&self, v: NodeId) -> usize {
        self.offsets[v as usize + 1] - self.offsets[v as usize]
    }

    /// Neighbor ids and edge ids of `v`.
    pub fn row(&self, v: NodeId) -> (&[NodeId], &[EdgeId]) {
        let (a, b) = (self.offsets[v as usize], self.offsets[v as usize + 1]);
        (&self.neighbors[a..b], &self.edge_ids[a..b])
    }
}

/// Immutable attributed graph: structure, features, weights and labels.
#[derive(Debug, Clone)]
pub struct Graph {
    pub num_nodes: usize,
    pub num_edges: usize,
    pub csr: AdjIndex,
    pub csc: AdjIndex,
    /// Edge id -> (source, destination).
    pub edges: Vec<(NodeId, NodeId)>,
    pub edge_weights: Vec<Real>,
    pub edge_features: Option<Tensor>,
    pub node_features: Tensor,
    pub labels: Vec<Option<u32>>,
    /// Weighted degree d_i = sum_j A(i, j) over stored out-edges.
    pub degrees: Vec<Real>,
}

/// Ingestion policy for the text dataset format.
#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    /// Add the reverse of every input edge (citation networks are stored as
    /// undirected pairs).
    pub symmetrize: bool,
    /// Add a unit-weight self-loop to every node during ingestion.
    pub add_self_loops: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            symmetrize: true,
            add_self_loops: false,
        }
    }
}

/// Builds CSR and CSC with deterministic edge-id assignment: edges sorted by
/// (src, dst, input order).
pub fn build_indices(
    num_nodes: usize,
    edges: &[(NodeId, NodeId)],
) -> Result<(AdjIndex, AdjIndex, Vec<usize>)> {
    for &(s, d) in edges {
        for id in [s, d] {
            if id as usize >= num_nodes {
                return Err(CoreError::NodeRange {
                    id: id as u64,
                    bound: num_nodes as u64,
                });
            }
        }
    }
    // Permutation assigning final edge ids: sort by (src, dst, input line).
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by_key(|&i| (edges[i].0, edges[i].1, i));

    let m = edges.len();
    let mut csr_offsets = vec![0usize; num_nodes + 1];
    let mut csc_offsets = vec![0usize; num_nodes + 1];
    for &(s, d) in edges {
        csr_offsets[s as usize + 1] += 1;
        csc_offsets[d as usize + 1] += 1;
    }
    for i in 0..num_nodes {
        csr_offsets[i + 1] += csr_offsets[i];
        csc_offsets[i + 1] += csc_offsets[i];
    }

    // CSR in edge-id order: ids ascend within each source row and neighbor
    // lists come out sorted by (dst, id) automatically.
    let mut csr_neighbors = vec![0 as NodeId; m];
    let mut csr_ids = vec![0 as EdgeId; m];
    let mut cursor = csr_offsets.clone();
    for (eid, &input_idx) in order.iter().enumerate() {
        let (s, d) = edges[input_idx];
        let at = cursor[s as usize];
        csr_neighbors[at] = d;
        csr_ids[at] = eid as EdgeId;
        cursor[s as usize] += 1;
    }

    // CSC sorted by (src, id) within each destination row.
    let mut by_dst: Vec<(NodeId, NodeId, EdgeId)> = order
        .iter()
        .enumerate()
        .map(|(eid, &input_idx)| {
            let (s, d) = edges[input_idx];
            (d, s, eid as EdgeId)
        })
        .collect();
    by_dst.sort_by_key(|&(d, s, id)| (d, s, id));
    let mut csc_neighbors = vec![0 as NodeId; m];
    let mut csc_ids = vec![0 as EdgeId; m];
    for (at, &(_, s, id)) in by_dst.iter().enumerate() {
        csc_neighbors[at] = s;
        csc_ids[at] = id;
    }

    Ok((
        AdjIndex {
            offsets: csr_offsets,
            neighbors: csr_neighbors,
            edge_ids: csr_ids,
        },
        AdjIndex {
            offsets: csc_offsets,
            neighbors: csc_neighbors,
            edge_ids: csc_ids,
        },
        order,
    ))
}

impl Graph {
    /// Assembles a graph from an edge list; edge ids follow the sorted
    /// (src, dst, input order) assignment and attribute vectors are permuted
    /// to match.
    pub fn from_edges(
        num_nodes: usize,
        edges: Vec<(NodeId, NodeId)>,
        weights: Vec<Real>,
        edge_features: Option<Tensor>,
        node_features: Tensor,
        labels: Vec<Option<u32>>,
    ) -> Result<Self> {
        assert_eq!(edges.len(), weights.len(), "one weight per edge");
        assert_eq!(node_features.rows(), num_nodes, "one feature row per node");
        assert_eq!(labels.len(), num_nodes);
        for &w in &weights {
            if !w.is_finite() {
                return Err(CoreError::NonFinite {
                    op: "edge weight".into(),
                });
            }
        }
        let (csr, csc, order) = build_indices(num_nodes, &edges)?;
        let sorted_edges: Vec<(NodeId, NodeId)> = order.iter().map(|&i| edges[i]).collect();
        let sorted_weights: Vec<Real> = order.iter().map(|&i| weights[i]).collect();
        let sorted_feats = edge_features.map(|f| {
            assert_eq!(f.rows(), sorted_edges.len(), "one feature row per edge");
            f.gather_rows(&order)
        });
        let mut degrees = vec![0.0 as Real; num_nodes];
        for (&(s, _), &w) in sorted_edges.iter().zip(&sorted_weights) {
            degrees[s as usize] += w;
        }
        Ok(Self {
            num_nodes,
            num_edges: sorted_edges.len(),
            csr,
            csc,
            edges: sorted_edges,
            edge_weights: sorted_weights,
            edge_features: sorted_feats,
            node_features,
            labels,
            degrees,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn edge_feature_dim(&self) -> usize {
        self.edge_features.as_ref().map_or(0, Tensor::cols)
    }

    pub fn out_degree(&self, v: NodeId) -> usize {
        self.csr.degree(v)
    }

    pub fn in_degree(&self, v: NodeId) -> usize {
        self.csc.degree(v)
    }

    /// Looks up the edge id of `(src, dst)`; with multi-edges the smallest id
    /// wins.
    pub fn edge_between(&self, src: NodeId, dst: NodeId) -> Option<EdgeId> {
        let (neighbors, ids) = self.csr.row(src);
        neighbors
            .iter()
            .zip(ids)
            .find(|(&n, _)| n == dst)
            .map(|(_, &id)| id)
    }

    /// Normalized-Laplacian weight of the stored edge `(i, j)`:
    /// `-a_ij / sqrt(d_i d_j)` off the diagonal and `1 - a_ii / d_i` for a
    /// self-loop. Degree-zero endpoints yield 0 so isolated nodes propagate
    /// nothing.
    pub fn gcn_edge_weight(&self, i: NodeId, j: NodeId) -> Result<Real> {
        let eid = self
            .edge_between(i, j)
            .ok_or(CoreError::NoSuchEdge { src: i, dst: j })?;
        let a = self.edge_weights[eid as usize];
        let (di, dj) = (self.degrees[i as usize], self.degrees[j as usize]);
        if i == j {
            if di == 0.0 {
                return Ok(0.0);
            }
            return Ok(1.0 - a / di);
        }
        if di == 0.0 || dj == 0.0 {
            return Ok(0.0);
        }
        Ok(-a / (di * dj).sqrt())
    }

    /// Verifies the structural invariants; test and debugging aid.
    pub fn check_invariants(&self) -> Result<()> {
        let m = self.num_edges;
        let fail = |msg: &str| -> Result<()> {
            Err(CoreError::Config(format!("graph invariant violated: {msg}")))
        };
        if self.csr.offsets.len() != self.num_nodes + 1 || self.csc.offsets.len() != self.num_nodes + 1
        {
            return fail("offset lengths");
        }
        if *self.csr.offsets.last().unwrap() != m || *self.csc.offsets.last().unwrap() != m {
            return fail("final offsets must equal M");
        }
        for w in [&self.csr.offsets, &self.csc.offsets] {
            if w.windows(2).any(|p| p[0] > p[1]) {
                return fail("offsets must be non-decreasing");
            }
        }
        let mut seen_csr = vec![false; m];
        for v in 0..self.num_nodes as NodeId {
            let (neigh, ids) = self.csr.row(v);
            for (&n, &id) in neigh.iter().zip(ids) {
                if self.edges[id as usize] != (v, n) {
                    return fail("csr edge id mismatch");
                }
                if std::mem::replace(&mut seen_csr[id as usize], true) {
                    return fail("edge id repeated in csr");
                }
            }
        }
        let mut seen_csc = vec![false; m];
        for v in 0..self.num_nodes as NodeId {
            let (neigh, ids) = self.csc.row(v);
            for (&n, &id) in neigh.iter().zip(ids) {
                if self.edges[id as usize] != (n, v) {
                    return fail("csc edge id mismatch");
                }
                if std::mem::replace(&mut seen_csc[id as usize], true) {
                    return fail("edge id repeated in csc");
                }
            }
        }
        if seen_csr.iter().any(|&s| !s) || seen_csc.iter().any(|&s| !s) {
            return fail("every edge id must appear in both indices");
        }
        if !self.edge_weights.iter().all(|w| w.is_finite()) {
            return fail("weights must be finite");
        }
        if self.node_features.rows() != self.num_nodes {
            return fail("feature row count");
        }
        Ok(())
    }
}

/// How propagation coefficients are derived from the stored weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// True normalized Laplacian `L = I - D^{-1/2} A D^{-1/2}`: signed
    /// off-diagonal edge coefficients plus a unit diagonal term.
    Laplacian,
    /// Renormalization-trick propagation `D~^{-1/2}(A + I)D~^{-1/2}`.
    Renormalized,
}

impl NormMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormMode::Laplacian => "laplacian",
            NormMode::Renormalized => "renormalized",
        }
    }
}

impl std::str::FromStr for NormMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laplacian" => Ok(NormMode::Laplacian),
            "renormalized" => Ok(NormMode::Renormalized),
            other => Err(CoreError::Config(format!("unknown normalization {other}"))),
        }
    }
}

/// Per-edge propagation coefficients and per-node diagonal (self) terms for
/// a graph-convolution program under the chosen normalization.
#[derive(Debug, Clone)]
pub struct PropWeights {
    pub per_edge: Vec<Real>,
    pub diag: Vec<Real>,
    pub mode: NormMode,
}

impl PropWeights {
    /// Unit edge coefficients, zero diagonal; for programs that do their own
    /// weighting (attention, identity test programs).
    pub fn unit(graph: &Graph) -> Self {
        Self {
            per_edge: vec![1.0; graph.num_edges],
            diag: vec![0.0; graph.num_nodes],
            mode: NormMode::Renormalized,
        }
    }

    pub fn gcn(graph: &Graph, mode: NormMode) -> Self {
        match mode {
            NormMode::Laplacian => {
                let mut per_edge = vec![0.0 as Real; graph.num_edges];
                // Diagonal starts at 1 (the I term); stored self-loops fold
                // their -a/d contribution into it.
                let mut diag = vec![1.0 as Real; graph.num_nodes];
                for (eid, &(s, d)) in graph.edges.iter().enumerate() {
                    let a = graph.edge_weights[eid];
                    let (ds, dd) = (graph.degrees[s as usize], graph.degrees[d as usize]);
                    if s == d {
                        per_edge[eid] = 0.0;
                        if ds != 0.0 {
                            diag[s as usize] -= a / ds;
                        }
                    } else if ds == 0.0 || dd == 0.0 {
                        per_edge[eid] = 0.0;
                    } else {
                        per_edge[eid] = -a / (ds * dd).sqrt();
                    }
                }
                Self {
                    per_edge,
                    diag,
                    mode,
                }
            }
            NormMode::Renormalized => {
                // d~ = d + 1 from the implicit added self-loop.
                let dt: Vec<Real> = graph.degrees.iter().map(|&d| d + 1.0).collect();
                let mut per_edge = vec![0.0 as Real; graph.num_edges];
                let mut diag: Vec<Real> = dt.iter().map(|&d| 1.0 / d).collect();
                for (eid, &(s, d)) in graph.edges.iter().enumerate() {
                    let a = graph.edge_weights[eid];
                    if s == d {
                        per_edge[eid] = 0.0;
                        diag[s as usize] += a / dt[s as usize];
                    } else {
                        per_edge[eid] = a / (dt[s as usize] * dt[d as usize]).sqrt();
                    }
                }
                Self {
                    per_edge,
                    diag,
                    mode,
                }
            }
        }
    }
}

/// A loaded dataset: graph plus split masks.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub graph: Graph,
    pub train_mask: Vec<NodeId>,
    pub validation_mask: Vec<NodeId>,
    pub test_mask: Vec<NodeId>,
    pub class_count: usize,
}

impl DatasetBundle {
    pub fn check_masks(&self) -> Result<()> {
        let n = self.graph.num_nodes as NodeId;
        let mut seen = vec![false; n as usize];
        for mask in [&self.train_mask, &self.validation_mask, &self.test_mask] {
            for &v in mask {
                if v >= n {
                    return Err(CoreError::NodeRange {
                        id: v as u64,
                        bound: n as u64,
                    });
                }
                if std::mem::replace(&mut seen[v as usize], true) {
                    return Err(CoreError::Config(format!("node {v} in multiple splits")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_graph(n: usize, edges: Vec<(NodeId, NodeId)>) -> Graph {
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

    #[test]
    fn csr_offsets_for_two_out_edges() {
        let g = unit_graph(3, vec![(0, 1), (0, 2)]);
        assert_eq!(g.csr.offsets, vec![0, 2, 2, 2]);
        assert_eq!(g.csr.neighbors, vec![1, 2]);
        g.check_invariants().unwrap();
    }

    #[test]
    fn self_loop_appears_in_both_directions() {
        let g = unit_graph(3, vec![(1, 1)]);
        assert_eq!(g.csr.row(1).0, &[1]);
        assert_eq!(g.csc.row(1).0, &[1]);
        g.check_invariants().unwrap();
    }

    #[test]
    fn permuted_input_builds_identical_indices() {
        let edges = vec![(2, 0), (0, 1), (1, 2), (0, 2), (2, 1)];
        let mut permuted = edges.clone();
        permuted.reverse();
        let a = unit_graph(3, edges);
        let b = unit_graph(3, permuted);
        assert_eq!(a.csr, b.csr);
        assert_eq!(a.csc, b.csc);
        assert_eq!(a.edges, b.edges);
    }

    #[test]
    fn empty_edge_file_gives_empty_offsets() {
        let g = unit_graph(3, vec![]);
        assert_eq!(g.csr.offsets, vec![0, 0, 0, 0]);
        assert_eq!(g.num_edges, 0);
    }

    #[test]
    fn out_of_range_id_rejected() {
        let r = build_indices(2, &[(0, 5)]);
        assert!(matches!(r, Err(CoreError::NodeRange { id: 5, .. })));
    }

    #[test]
    fn gcn_weight_hand_laplacian() {
        // Two nodes, undirected unit edge plus self-loops: d = 2 each.
        let g = unit_graph(2, vec![(0, 1), (1, 0), (0, 0), (1, 1)]);
        assert!((g.gcn_edge_weight(0, 1).unwrap() - (-0.5)).abs() < 1e-15);
        assert!((g.gcn_edge_weight(0, 0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gcn_weight_isolated_self_loop_is_zero() {
        let g = unit_graph(2, vec![(0, 0)]);
        assert_eq!(g.gcn_edge_weight(0, 0).unwrap(), 0.0);
    }

    #[test]
    fn gcn_weight_star_center() {
        // K1,3 star, undirected unit edges: center 0, leaves 1..3.
        let edges = vec![(0, 1), (1, 0), (0, 2), (2, 0), (0, 3), (3, 0)];
        let g = unit_graph(4, edges);
        let w = g.gcn_edge_weight(0, 1).unwrap();
        assert!((w as f64 + 1.0 / 3.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn gcn_weight_missing_edge_errors() {
        let g = unit_graph(3, vec![(0, 1)]);
        assert!(matches!(
            g.gcn_edge_weight(1, 2),
            Err(CoreError::NoSuchEdge { .. })
        ));
    }

    #[test]
    fn degree_sums_match_edge_count() {
        let g = unit_graph(5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 4)]);
        let out: usize = (0..5).map(|v| g.out_degree(v)).sum();
        let inn: usize = (0..5).map(|v| g.in_degree(v)).sum();
        assert_eq!(out, g.num_edges);
        assert_eq!(inn, g.num_edges);
    }

    #[test]
    fn laplacian_prop_weights_match_edge_op() {
        let edges = vec![(0, 1), (1, 0), (0, 0), (1, 1), (1, 2), (2, 1)];
        let g = unit_graph(3, edges);
        let pw = PropWeights::gcn(&g, NormMode::Laplacian);
        for (eid, &(s, d)) in g.edges.iter().enumerate() {
            if s != d {
                assert_eq!(pw.per_edge[eid], g.gcn_edge_weight(s, d).unwrap());
            }
        }
        // Self-loop weight lands on the diagonal: L(0,0) = 1 - 1/2.
        assert!((pw.diag[0] - 0.5).abs() < 1e-15);
        // Node 2 has no self-loop: diagonal 1.
        assert!((pw.diag[2] - 1.0).abs() < 1e-15);
    }
}
