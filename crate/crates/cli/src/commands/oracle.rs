//! `gt oracle`: spectral-oracle equivalence sweep on seeded random
//! instances, for debugging numerical drift.

use gt_core::engine::{self, EngineConfig, TaskContext};
use gt_core::graph::{NormMode, PropWeights};
use gt_core::models::ModelSpec;
use gt_core::nn::Activation;
use gt_core::oracle::{self, DenseGraph};
use gt_core::partition::{partition_even, PartitionOptions};
use gt_core::synth::{random_bundle, RandomGraphSpec};
use gt_core::view::build_view;
use gt_core::Result;

use crate::OracleArgs;

pub fn run(args: &OracleArgs) -> Result<u8> {
    let mut worst_fwd: f64 = 0.0;
    let mut failures = 0;
    for case in 0..args.cases {
        let seed = args.seed + case as u64;
        let nodes = 8 + (seed as usize % args.max_nodes.saturating_sub(8).max(1));
        let bundle = random_bundle(&RandomGraphSpec {
            nodes,
            edges: nodes * 3,
            feature_dim: 3,
            classes: 2,
            seed,
            symmetric: true,
        });
        let layers = 1 + (case % 3);
        let dims = vec![3; layers + 1];
        let mut spec = ModelSpec::gcn(dims, Activation::Tanh, 2);
        spec.normalization = NormMode::Laplacian;
        let art = spec.init(seed).unwrap();

        let dg = DenseGraph::from_graph(&bundle.graph);
        let weights: Vec<_> = (0..layers).map(|k| art.params.value(k).clone()).collect();
        let trace = oracle::dense_gcn_forward(&dg, &weights, &spec.activations);
        let hk = trace.h.last().unwrap();
        let mut want = hk.matmul(art.params.value(art.decoder.w));
        for r in 0..want.rows() {
            for (o, &bv) in want
                .row_mut(r)
                .iter_mut()
                .zip(art.params.value(art.decoder.b).row(0))
            {
                *o += bv;
            }
        }

        for partitions in [1usize, 2, 3, 5] {
            let plan = partition_even(
                &bundle.graph,
                partitions.min(nodes),
                PartitionOptions {
                    seed,
                    contiguous: false,
                },
            )?;
            let targets: Vec<u32> = (0..nodes as u32).collect();
            let view = build_view(&bundle.graph, &targets, layers, None, 0);
            let prop = PropWeights::gcn(&bundle.graph, NormMode::Laplacian);
            let ctx = TaskContext {
                graph: &bundle.graph,
                view: &view,
                plan: &plan,
                programs: &art.programs,
                decoder: art.decoder,
                params: &art.params,
                prop: &prop,
            };
            let out = engine::run_task(
                &ctx,
                &EngineConfig {
                    backward: false,
                    collect_logits: true,
                    threaded: partitions > 1,
                    ..Default::default()
                },
            )?;
            let mut diff: f64 = 0.0;
            for (v, row) in &out.logits {
                for (a, b) in row.iter().zip(want.row(*v as usize)) {
                    diff = diff.max((a - b).abs() as f64);
                }
            }
            worst_fwd = worst_fwd.max(diff);
            let ok = diff < 1e-10;
            if !ok {
                failures += 1;
            }
            println!(
                "case {case} N={nodes} K={layers} P={partitions}: max abs diff {diff:.3e} {}",
                if ok { "ok" } else { "FAIL" }
            );
        }
    }
    println!(
        "{} cases x 4 partitionings, worst forward diff {worst_fwd:.3e}, {failures} failures",
        args.cases
    );
    Ok(if failures > 0 { 2 } else { 0 })
}
