//! `gt partition`: build the master/mirror layout and a clustering, write
//! the exchange files, and print a stats block.

use std::fs::File;
use std::io::Write;

use gt_core::cluster::{cluster_louvain, load_clusters, modularity};
use gt_core::partition::{partition_even, replica_factor, write_plan, PartitionOptions};
use gt_core::{CoreError, Result};

use crate::commands::{ensure_out_dir, load_bundle, load_config};
use crate::CommonArgs;

pub fn run(args: &CommonArgs) -> Result<u8> {
    let cfg = load_config(args)?;
    let bundle = load_bundle(&cfg)?;
    ensure_out_dir(&cfg.out_dir)?;

    let plan = partition_even(
        &bundle.graph,
        cfg.partitions,
        PartitionOptions {
            seed: cfg.seed,
            contiguous: cfg.contiguous,
        },
    )?;
    plan.check_invariants(&bundle.graph)?;
    let plan_path = cfg.out_dir.join("plan.tsv");
    write_plan(&plan_path, &plan)?;

    let clusters = match &cfg.clusters {
        Some(path) => load_clusters(path, bundle.graph.num_nodes)?,
        None => cluster_louvain(&bundle.graph, cfg.seed),
    };
    let cluster_path = cfg.out_dir.join("clusters.tsv");
    {
        let mut w = File::create(&cluster_path).map_err(|e| CoreError::Io {
            path: cluster_path.display().to_string(),
            source: e,
        })?;
        for (v, c) in clusters.cluster_of.iter().enumerate() {
            writeln!(w, "{v}\t{c}").map_err(|e| CoreError::Io {
                path: cluster_path.display().to_string(),
                source: e,
            })?;
        }
    }

    let q = modularity(&bundle.graph, &clusters.cluster_of);
    let mut stats = String::new();
    stats.push_str(&format!(
        "nodes={} edges={} partitions={}\n",
        bundle.graph.num_nodes, bundle.graph.num_edges, cfg.partitions
    ));
    for p in 0..plan.partition_count {
        stats.push_str(&format!(
            "partition {p}: masters={} mirrors={} edges={}\n",
            plan.master_count(p),
            plan.mirror_count(p),
            plan.edges_of[p].len()
        ));
    }
    stats.push_str(&format!(
        "replica_factor placeholder={} classic={:.6}\n",
        replica_factor(&plan, true),
        replica_factor(&plan, false)
    ));
    stats.push_str(&format!(
        "clusters={} modularity={q:.6}\n",
        clusters.cluster_count
    ));
    print!("{stats}");
    let stats_path = cfg.out_dir.join("partition_stats.txt");
    std::fs::write(&stats_path, stats).map_err(|e| CoreError::Io {
        path: stats_path.display().to_string(),
        source: e,
    })?;
    Ok(0)
}
