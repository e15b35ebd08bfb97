//! End-to-end verification helpers for the gradcheck/oracle commands and
//! the acceptance suite: engine runs against finite differences and the
//! dense spectral reference.

use crate::engine::{self, EngineConfig, TaskContext, TaskOutcome};
use crate::error::Result;
use crate::graph::{NodeId, PropWeights};
use crate::models::{LayerKind, ModelArtifacts, ModelSpec};
use crate::nn::ParameterSet;
use crate::oracle::{self, DenseGraph};
use crate::partition::{partition_even, PartitionOptions, PartitionPlan};
use crate::tensor::{Real, Tensor};
use crate::view::build_view;
use crate::DatasetBundle;

pub struct PreparedRun {
    pub artifacts: ModelArtifacts,
    pub plan: PartitionPlan,
    pub prop: PropWeights,
}

pub fn prepare(
    bundle: &DatasetBundle,
    spec: &ModelSpec,
    seed: u64,
    partitions: usize,
) -> Result<PreparedRun> {
    let artifacts = spec.init(seed)?;
    let plan = partition_even(
        &bundle.graph,
        partitions,
        PartitionOptions {
            seed,
            contiguous: false,
        },
    )?;
    let prop = match spec.kind {
        LayerKind::Gcn => PropWeights::gcn(&bundle.graph, spec.normalization),
        LayerKind::GatEdge => PropWeights::unit(&bundle.graph),
    };
    Ok(PreparedRun {
        artifacts,
        plan,
        prop,
    })
}

/// Full-graph forward (+ optional backward) with the given parameters.
pub fn run_full_graph(
    bundle: &DatasetBundle,
    run: &PreparedRun,
    params: &ParameterSet,
    cfg: &EngineConfig,
) -> Result<TaskOutcome> {
    let targets: Vec<NodeId> = (0..bundle.graph.num_nodes as NodeId).collect();
    let view = build_view(
        &bundle.graph,
        &targets,
        run.artifacts.programs.len(),
        None,
        0,
    );
    let ctx = TaskContext {
        graph: &bundle.graph,
        view: &view,
        plan: &run.plan,
        programs: &run.artifacts.programs,
        decoder: run.artifacts.decoder,
        params,
        prop: &run.prop,
    };
    engine::run_task(&ctx, cfg)
}

/// Maximum relative error between the engine's reduced parameter gradients
/// and central finite differences of its own loss, over every component.
pub fn model_fd_max_err(
    bundle: &DatasetBundle,
    spec: &ModelSpec,
    seed: u64,
    partitions: usize,
) -> Result<f64> {
    model_fd_max_err_opts(bundle, spec, seed, partitions, false)
}

/// As [`model_fd_max_err`], optionally also differencing every node-feature
/// component against the engine's input gradients.
pub fn model_fd_max_err_opts(
    bundle: &DatasetBundle,
    spec: &ModelSpec,
    seed: u64,
    partitions: usize,
    check_inputs: bool,
) -> Result<f64> {
    let run = prepare(bundle, spec, seed, partitions)?;
    let fwd_cfg = EngineConfig {
        backward: false,
        threaded: false,
        ..Default::default()
    };
    let out = run_full_graph(
        bundle,
        &run,
        &run.artifacts.params,
        &EngineConfig {
            threaded: false,
            collect_input_grads: check_inputs,
            ..Default::default()
        },
    )?;
    let grads = out.grads.as_ref().expect("backward requested");
    let eps = 1e-6;
    let mut max_err: f64 = 0.0;
    let mut track = |num: f64, ana: f64| {
        let denom = num.abs().max(ana.abs()).max(1e-8);
        max_err = max_err.max((num - ana).abs() / denom);
    };
    #[allow(clippy::needless_range_loop)] // clone-perturb per parameter
    for pid in 0..run.artifacts.params.len() {
        for c in 0..run.artifacts.params.value(pid).len() {
            let mut plus = run.artifacts.params.clone();
            plus.value_mut(pid).data_mut()[c] += eps as Real;
            let mut minus = run.artifacts.params.clone();
            minus.value_mut(pid).data_mut()[c] -= eps as Real;
            let lp = run_full_graph(bundle, &run, &plus, &fwd_cfg)?.loss;
            let lm = run_full_graph(bundle, &run, &minus, &fwd_cfg)?.loss;
            track((lp - lm) / (2.0 * eps), grads[pid].data()[c] as f64);
        }
    }
    if check_inputs {
        let input_grads = out.input_grads.as_ref().expect("input grads requested");
        for v in 0..bundle.graph.num_nodes {
            for c in 0..bundle.graph.feature_dim() {
                let mut plus = bundle.clone();
                *plus
                    .graph
                    .node_features
                    .row_mut(v)
                    .get_mut(c)
                    .unwrap() += eps as Real;
                let mut minus = bundle.clone();
                *minus
                    .graph
                    .node_features
                    .row_mut(v)
                    .get_mut(c)
                    .unwrap() -= eps as Real;
                let lp = run_full_graph(&plus, &run, &run.artifacts.params, &fwd_cfg)?.loss;
                let lm = run_full_graph(&minus, &run, &run.artifacts.params, &fwd_cfg)?.loss;
                track((lp - lm) / (2.0 * eps), input_grads.at(v, c) as f64);
            }
        }
    }
    Ok(max_err)
}

/// Finite-difference check of a *subgraph* run: loss over a K-hop view of
/// the given targets (optionally sampled) against the engine's reduced
/// gradients. Exercises partial layer activity, fringe nodes, and sampled
/// edge sets.
pub fn view_fd_max_err(
    bundle: &DatasetBundle,
    spec: &ModelSpec,
    targets: &[NodeId],
    sampler: Option<&crate::view::SamplerConfig>,
    seed: u64,
    partitions: usize,
) -> Result<f64> {
    let run = prepare(bundle, spec, seed, partitions)?;
    let view = build_view(
        &bundle.graph,
        targets,
        run.artifacts.programs.len(),
        sampler,
        seed,
    );
    let loss_of = |params: &ParameterSet| -> Result<f64> {
        let ctx = TaskContext {
            graph: &bundle.graph,
            view: &view,
            plan: &run.plan,
            programs: &run.artifacts.programs,
            decoder: run.artifacts.decoder,
            params,
            prop: &run.prop,
        };
        Ok(engine::run_task(
            &ctx,
            &EngineConfig {
                backward: false,
                ..Default::default()
            },
        )?
        .loss)
    };
    let ctx = TaskContext {
        graph: &bundle.graph,
        view: &view,
        plan: &run.plan,
        programs: &run.artifacts.programs,
        decoder: run.artifacts.decoder,
        params: &run.artifacts.params,
        prop: &run.prop,
    };
    let out = engine::run_task(&ctx, &EngineConfig::default())?;
    let grads = out.grads.as_ref().expect("backward requested");
    let eps = 1e-6;
    let mut max_err: f64 = 0.0;
    #[allow(clippy::needless_range_loop)] // clone-perturb per parameter
    for pid in 0..run.artifacts.params.len() {
        for c in 0..run.artifacts.params.value(pid).len() {
            let mut plus = run.artifacts.params.clone();
            plus.value_mut(pid).data_mut()[c] += eps as Real;
            let mut minus = run.artifacts.params.clone();
            minus.value_mut(pid).data_mut()[c] -= eps as Real;
            let num = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * eps);
            let ana = grads[pid].data()[c] as f64;
            let denom = num.abs().max(ana.abs()).max(1e-8);
            max_err = max_err.max((num - ana).abs() / denom);
        }
    }
    Ok(max_err)
}

/// Maximum absolute difference between engine logits (message-passing GCN,
/// true-Laplacian normalization) and the dense spectral recursion composed
/// with the same decoder.
pub fn gcn_engine_vs_dense(
    bundle: &DatasetBundle,
    spec: &ModelSpec,
    seed: u64,
    partitions: usize,
) -> Result<f64> {
    let run = prepare(bundle, spec, seed, partitions)?;
    let out = run_full_graph(
        bundle,
        &run,
        &run.artifacts.params,
        &EngineConfig {
            backward: false,
            collect_logits: true,
            threaded: partitions > 1,
            ..Default::default()
        },
    )?;
    let dg = DenseGraph::from_graph(&bundle.graph);
    let layers = spec.layer_count();
    let weights: Vec<Tensor> = (0..layers)
        .map(|k| run.artifacts.params.value(run_layer_weight_id(&run, k)).clone())
        .collect();
    let prop_mat = dg.propagation_matrix(spec.normalization);
    let trace = oracle::dense_forward_with(&prop_mat, &dg.features, &weights, &spec.activations);
    let hk = trace.h.last().unwrap();
    let dec_w = run.artifacts.params.value(run.artifacts.decoder.w);
    let dec_b = run.artifacts.params.value(run.artifacts.decoder.b);
    let mut want = hk.matmul(dec_w);
    for r in 0..want.rows() {
        for (o, &bv) in want.row_mut(r).iter_mut().zip(dec_b.row(0)) {
            *o += bv;
        }
    }
    let mut diff: f64 = 0.0;
    for (v, row) in &out.logits {
        for (a, b) in row.iter().zip(want.row(*v as usize)) {
            diff = diff.max((a - b).abs() as f64);
        }
    }
    Ok(diff)
}

/// ParamId of layer k's weight matrix under the standard construction order
/// (weights first per layer, bias optional).
fn run_layer_weight_id(run: &PreparedRun, layer: usize) -> usize {
    // Parameter names are "layer{k}.weight"; resolve by name for safety.
    let want = format!("layer{layer}.weight");
    run.artifacts
        .params
        .iter()
        .position(|p| p.name == want)
        .expect("layer weight present")
}
