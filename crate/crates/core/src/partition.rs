//! Master/mirror graph layout: even node assignment, source-master edge
//! ownership, and placeholder mirror bookkeeping.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::graph::{EdgeId, Graph, NodeId};

pub type PartitionId = usize;

#[derive(Debug, Clone, Copy, Default)]
pub struct PartitionOptions {
    pub seed: u64,
    /// Assign contiguous id ranges instead of the seeded shuffle; used to
    /// reproduce hand-layout examples.
    pub contiguous: bool,
}

/// The distributed layout: master assignment, per-partition edge ownership,
/// mirror placeholder lists and local id maps.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub partition_count: usize,
    /// node -> master partition
    pub master_of: Vec<PartitionId>,
    /// partition -> owned edge ids (ascending)
    pub edges_of: Vec<Vec<EdgeId>>,
    /// partition -> mirror node ids (ascending); placeholders only
    pub mirrors_of: Vec<Vec<NodeId>>,
    /// partition -> masters hosted there (ascending)
    pub masters_of: Vec<Vec<NodeId>>,
    /// partition -> global node id -> local index (masters first, then
    /// mirrors, both ascending)
    pub local_id: Vec<HashMap<NodeId, u32>>,
    /// partition -> local index -> global node id
    pub global_id: Vec<Vec<NodeId>>,
}

impl PartitionPlan {
    pub fn master_count(&self, p: PartitionId) -> usize {
        self.masters_of[p].len()
    }

    pub fn mirror_count(&self, p: PartitionId) -> usize {
        self.mirrors_of[p].len()
    }

    pub fn is_master(&self, p: PartitionId, v: NodeId) -> bool {
        self.master_of[v as usize] == p
    }

    /// Derives edge ownership, mirrors and id maps from a master assignment.
    fn derive(graph: &Graph, partition_count: usize, master_of: Vec<PartitionId>) -> Self {
        let mut edges_of = vec![Vec::new(); partition_count];
        for (eid, &(src, _)) in graph.edges.iter().enumerate() {
            edges_of[master_of[src as usize]].push(eid as EdgeId);
        }
        let mut masters_of = vec![Vec::new(); partition_count];
        for v in 0..graph.num_nodes {
            masters_of[master_of[v]].push(v as NodeId);
        }
        let mut mirrors_of = vec![Vec::new(); partition_count];
        for (p, edges) in edges_of.iter().enumerate() {
            let mut seen: Vec<NodeId> = Vec::new();
            for &eid in edges {
                let (s, d) = graph.edges[eid as usize];
                for v in [s, d] {
                    if master_of[v as usize] != p {
                        seen.push(v);
                    }
                }
            }
            seen.sort_unstable();
            seen.dedup();
            mirrors_of[p] = seen;
        }
        let mut local_id = vec![HashMap::new(); partition_count];
        let mut global_id = vec![Vec::new(); partition_count];
        for p in 0..partition_count {
            for &v in masters_of[p].iter().chain(mirrors_of[p].iter()) {
                local_id[p].insert(v, global_id[p].len() as u32);
                global_id[p].push(v);
            }
        }
        Self {
            partition_count,
            master_of,
            edges_of,
            mirrors_of,
            masters_of,
            local_id,
            global_id,
        }
    }

    pub fn check_invariants(&self, graph: &Graph) -> Result<()> {
        let fail =
            |msg: String| -> Result<()> { Err(CoreError::Config(format!("plan invariant: {msg}"))) };
        // Master counts balanced within 1.
        let counts: Vec<usize> = (0..self.partition_count).map(|p| self.master_count(p)).collect();
        let (lo, hi) = (
            counts.iter().min().copied().unwrap_or(0),
            counts.iter().max().copied().unwrap_or(0),
        );
        if hi - lo > 1 {
            return fail(format!("master counts unbalanced: {counts:?}"));
        }
        // Edge ownership: exactly once, by source master, and at least one
        // master endpoint.
        let mut owned = vec![false; graph.num_edges];
        for (p, edges) in self.edges_of.iter().enumerate() {
            for &eid in edges {
                if std::mem::replace(&mut owned[eid as usize], true) {
                    return fail(format!("edge {eid} owned twice"));
                }
                let (s, d) = graph.edges[eid as usize];
                if self.master_of[s as usize] != p {
                    return fail(format!("edge {eid} not owned by its source master"));
                }
                if self.master_of[s as usize] != p && self.master_of[d as usize] != p {
                    return fail(format!("edge {eid} has no master endpoint in {p}"));
                }
            }
        }
        if owned.iter().any(|&o| !o) {
            return fail("edge not owned by any partition".into());
        }
        // Mirror definition.
        for p in 0..self.partition_count {
            let mut expected: Vec<NodeId> = Vec::new();
            for &eid in &self.edges_of[p] {
                let (s, d) = graph.edges[eid as usize];
                for v in [s, d] {
                    if self.master_of[v as usize] != p {
                        expected.push(v);
                    }
                }
            }
            expected.sort_unstable();
            expected.dedup();
            if expected != self.mirrors_of[p] {
                return fail(format!("mirror list mismatch in partition {p}"));
            }
        }
        Ok(())
    }
}

/// Evenly assigns master nodes to `partition_count` partitions (seeded
/// shuffle then round-robin, or contiguous ranges) and derives the layout.
pub fn partition_even(
    graph: &Graph,
    partition_count: usize,
    options: PartitionOptions,
) -> Result<PartitionPlan> {
    let n = graph.num_nodes;
    if partition_count == 0 || partition_count > n.max(1) {
        return Err(CoreError::PartitionRange {
            p: partition_count,
            n,
        });
    }
    let master_of: Vec<PartitionId> = if options.contiguous {
        // Ranges of size ceil(n/P) for the first n % P partitions.
        let base = n / partition_count;
        let extra = n % partition_count;
        let mut assign = vec![0; n];
        let mut v = 0usize;
        for p in 0..partition_count {
            let size = base + usize::from(p < extra);
            for _ in 0..size {
                assign[v] = p;
                v += 1;
            }
        }
        assign
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        order.shuffle(&mut rng);
        let mut assign = vec![0; n];
        for (i, &v) in order.iter().enumerate() {
            assign[v] = i % partition_count;
        }
        assign
    };
    Ok(PartitionPlan::derive(graph, partition_count, master_of))
}

/// Replica factor of the layout. With placeholder mirrors the factor is
/// exactly 1 (mirrors hold transient state words, never payload copies);
/// with value-replicating mirrors it is (N_master + N_mirror) / N_master.
pub fn replica_factor(plan: &PartitionPlan, placeholder_mode: bool) -> f64 {
    if placeholder_mode {
        return 1.0;
    }
    let masters: usize = (0..plan.partition_count).map(|p| plan.master_count(p)).sum();
    let mirrors: usize = (0..plan.partition_count).map(|p| plan.mirror_count(p)).sum();
    if masters == 0 {
        return 1.0;
    }
    (masters + mirrors) as f64 / masters as f64
}

/// Writes the plan in the text exchange format: header `P=<count>` then one
/// `node_id  partition_id` line per node.
pub fn write_plan(path: impl AsRef<Path>, plan: &PartitionPlan) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "P={}", plan.partition_count)?;
        for (v, &p) in plan.master_of.iter().enumerate() {
            writeln!(w, "{v}\t{p}")?;
        }
        w.flush()
    })()
    .map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Reads a plan file and re-derives the layout against `graph`.
pub fn read_plan(path: impl AsRef<Path>, graph: &Graph) -> Result<PartitionPlan> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let p: usize = match lines.next() {
        Some((_, Ok(header))) if header.starts_with("P=") => {
            header[2..].trim().parse().map_err(|_| CoreError::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: "bad P header".into(),
            })?
        }
        _ => {
            return Err(CoreError::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: "missing `P=<count>` header".into(),
            })
        }
    };
    let mut master_of = vec![usize::MAX; graph.num_nodes];
    for (lineno, line) in lines {
        let line = line.map_err(|e| CoreError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        let err = |msg: &str| CoreError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: msg.into(),
        };
        if fields.len() != 2 {
            return Err(err("expected `node_id partition_id`"));
        }
        let v: usize = fields[0].parse().map_err(|_| err("bad node id"))?;
        let part: usize = fields[1].parse().map_err(|_| err("bad partition id"))?;
        if v >= graph.num_nodes {
            return Err(CoreError::NodeRange {
                id: v as u64,
                bound: graph.num_nodes as u64,
            });
        }
        if part >= p {
            return Err(err("partition id out of range"));
        }
        master_of[v] = part;
    }
    if let Some(missing) = master_of.iter().position(|&m| m == usize::MAX) {
        return Err(CoreError::Config(format!(
            "plan file missing node {missing}"
        )));
    }
    Ok(PartitionPlan::derive(graph, p, master_of))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use crate::tensor::Tensor;

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

    fn path4() -> Graph {
        unit_graph(4, vec![(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)])
    }

    #[test]
    fn single_partition_owns_everything() {
        let g = path4();
        let plan = partition_even(&g, 1, PartitionOptions::default()).unwrap();
        plan.check_invariants(&g).unwrap();
        assert_eq!(plan.mirror_count(0), 0);
        assert_eq!(plan.edges_of[0].len(), g.num_edges);
        assert_eq!(replica_factor(&plan, false), 1.0);
        assert_eq!(replica_factor(&plan, true), 1.0);
    }

    #[test]
    fn contiguous_path_layout_matches_hand_example() {
        let g = path4();
        let plan = partition_even(
            &g,
            2,
            PartitionOptions {
                contiguous: true,
                ..Default::default()
            },
        )
        .unwrap();
        plan.check_invariants(&g).unwrap();
        assert_eq!(plan.masters_of[0], vec![0, 1]);
        assert_eq!(plan.masters_of[1], vec![2, 3]);
        // Partition 0 owns edges with sources {0, 1} and mirrors node 2.
        let p0_sources: Vec<NodeId> = plan.edges_of[0]
            .iter()
            .map(|&e| g.edges[e as usize].0)
            .collect();
        assert!(p0_sources.iter().all(|&s| s <= 1));
        assert_eq!(plan.mirrors_of[0], vec![2]);
        assert_eq!(plan.mirrors_of[1], vec![1]);
        // Classic replica factor (4 + 2) / 4; placeholder mode exactly 1.
        assert!((replica_factor(&plan, false) - 1.5).abs() < 1e-15);
        assert_eq!(replica_factor(&plan, true), 1.0);
    }

    #[test]
    fn random_64_nodes_7_partitions_pigeonhole() {
        let bundle = synth::random_bundle(&synth::RandomGraphSpec {
            nodes: 64,
            edges: 200,
            feature_dim: 2,
            classes: 3,
            seed: 5,
            symmetric: false,
        });
        let plan = partition_even(
            &bundle.graph,
            7,
            PartitionOptions {
                seed: 9,
                contiguous: false,
            },
        )
        .unwrap();
        plan.check_invariants(&bundle.graph).unwrap();
        for p in 0..7 {
            let c = plan.master_count(p);
            assert!(c == 9 || c == 10, "partition {p} has {c} masters");
        }
    }

    #[test]
    fn ownership_partitions_edge_set_on_random_graphs() {
        for seed in 0..5u64 {
            let bundle = synth::random_bundle(&synth::RandomGraphSpec {
                nodes: 40,
                edges: 120,
                feature_dim: 2,
                classes: 2,
                seed,
                symmetric: seed % 2 == 0,
            });
            for p in [1usize, 2, 3, 5] {
                let plan = partition_even(
                    &bundle.graph,
                    p,
                    PartitionOptions {
                        seed,
                        contiguous: false,
                    },
                )
                .unwrap();
                plan.check_invariants(&bundle.graph).unwrap();
            }
        }
    }

    #[test]
    fn out_of_range_partition_count() {
        let g = path4();
        assert!(matches!(
            partition_even(&g, 0, PartitionOptions::default()),
            Err(CoreError::PartitionRange { .. })
        ));
        assert!(matches!(
            partition_even(&g, 5, PartitionOptions::default()),
            Err(CoreError::PartitionRange { .. })
        ));
    }

    #[test]
    fn plan_round_trips_through_file() {
        let g = path4();
        let plan = partition_even(
            &g,
            2,
            PartitionOptions {
                seed: 3,
                contiguous: false,
            },
        )
        .unwrap();
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("plan.tsv");
        write_plan(&path, &plan).unwrap();
        let back = read_plan(&path, &g).unwrap();
        assert_eq!(back.master_of, plan.master_of);
        assert_eq!(back.edges_of, plan.edges_of);
        assert_eq!(back.mirrors_of, plan.mirrors_of);
    }
}
