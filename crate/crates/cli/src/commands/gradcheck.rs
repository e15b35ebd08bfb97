//! `gt gradcheck`: the verification suite. One PASS/FAIL line per check,
//! nonzero exit on any failure.

use gt_core::engine::{self, AccKind, EngineConfig, TaskContext};
use gt_core::graph::{NormMode, PropWeights};
use gt_core::models::ModelSpec;
use gt_core::nn::{grad_check, Activation, CheckOpts, GradSink, ParameterSet, ScalarFn, Tape};
use gt_core::oracle::{self, DenseGraph};
use gt_core::partition::{partition_even, PartitionOptions};
use gt_core::synth::{random_bundle, random_edge_featured_bundle, RandomGraphSpec};
use gt_core::tensor::Tensor;
use gt_core::view::build_view;
use gt_core::{DatasetBundle, Result};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::GradcheckArgs;

type CheckResult = std::result::Result<String, String>;

fn random_tensor(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

fn harness(report: gt_core::nn::GradCheckReport) -> CheckResult {
    if report.pass {
        Ok(format!(
            "max rel err {:.2e} over {} components",
            report.max_rel_err, report.components
        ))
    } else {
        Err(format!("max rel err {:.2e}", report.max_rel_err))
    }
}

fn linear_gradcheck(seed: u64, opts: CheckOpts) -> Result<CheckResult> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    let w = params.push("w", random_tensor(&mut rng, 4, 2));
    let b = params.push("b", random_tensor(&mut rng, 1, 2));
    let x = random_tensor(&mut rng, 3, 4);
    let f: ScalarFn = &|tape, ids, ps| {
        let wid = tape.param(ps, w);
        let bid = tape.param(ps, b);
        let y = tape.linear(ids[0], wid, Some(bid));
        tape.softmax_xent_sum(y, &[0, 1, 0], 3)
    };
    Ok(harness(grad_check(f, &[x], &params, opts)?))
}

fn tanh_gradcheck(seed: u64) -> Result<CheckResult> {
    let mut rng = StdRng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, 1, 5);
    let params = ParameterSet::new();
    let f: ScalarFn = &|tape, ids, _| {
        let t = tape.tanh(ids[0]);
        tape.softmax_xent_sum(t, &[2], 1)
    };
    Ok(harness(grad_check(f, &[x], &params, CheckOpts::default())?))
}

fn elementwise_gradcheck(seed: u64) -> Result<CheckResult> {
    let mut rng = StdRng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, 1, 4);
    let y = random_tensor(&mut rng, 1, 4);
    let params = ParameterSet::new();
    let f: ScalarFn = &|tape, ids, _| {
        let m = tape.mul(ids[0], ids[1]);
        let e = tape.exp(m);
        let r = tape.relu(e);
        tape.softmax_xent_sum(r, &[1], 1)
    };
    Ok(harness(grad_check(
        f,
        &[x, y],
        &params,
        CheckOpts {
            tol: 1e-5,
            ..Default::default()
        },
    )?))
}

fn softmax_gradcheck(seed: u64) -> Result<CheckResult> {
    let mut rng = StdRng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, 4, 3);
    let params = ParameterSet::new();
    let f: ScalarFn = &|tape, ids, _| tape.softmax_xent_sum(ids[0], &[0, 2, 1, 1], 4);
    Ok(harness(grad_check(f, &[x], &params, CheckOpts::default())?))
}

fn relu_subgradient() -> CheckResult {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::row_vec(vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    let values = tape.value(y).data().to_vec();
    let set = ParameterSet::new();
    let mut sink = GradSink::new(&set, false);
    let mut grads = tape.backward(y, Tensor::row_vec(vec![1.0; 3]), &mut sink);
    let g = grads.take(x).unwrap();
    if values == vec![0.0, 0.0, 2.0] && g.data() == [0.0, 0.0, 1.0] {
        Ok("relu(-1,0,2) and subgradient at 0".into())
    } else {
        Err(format!("values {values:?} grads {:?}", g.data()))
    }
}

fn softmax_closed_forms() -> CheckResult {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(2, 4));
    let loss = tape.softmax_xent_sum(x, &[0, 3], 2);
    let uniform = tape.value(loss).at(0, 0) as f64;
    if (uniform - 4.0f64.ln()).abs() > 1e-12 {
        return Err(format!("uniform loss {uniform} != ln 4"));
    }
    let mut tape = Tape::new();
    let x = tape.input(Tensor::from_vec(1, 2, vec![10.0, -10.0]));
    let loss = tape.softmax_xent_sum(x, &[0], 1);
    let confident = tape.value(loss).at(0, 0) as f64;
    if (confident - 2.0611536e-9).abs() > 1e-12 {
        return Err(format!("confident loss {confident}"));
    }
    Ok(format!("ln C = {uniform:.6}, confident = {confident:.3e}"))
}

/// Finite differences of the engine's end-to-end loss against its reduced
/// gradients, over every parameter component.
fn engine_fd(bundle: &DatasetBundle, spec: &ModelSpec, seed: u64, partitions: usize) -> Result<f64> {
    gt_core::verify::model_fd_max_err(bundle, spec, seed, partitions)
}

fn fd_result(max_err: f64, tol: f64) -> CheckResult {
    if max_err < tol {
        Ok(format!("max rel err {max_err:.2e}"))
    } else {
        Err(format!("max rel err {max_err:.2e} over tol {tol:.0e}"))
    }
}

fn engine_vs_dense(seed: u64, cases: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let bundle = random_bundle(&RandomGraphSpec {
            nodes: 16,
            edges: 50,
            feature_dim: 3,
            classes: 2,
            seed: seed + case as u64,
            symmetric: true,
        });
        let mut spec = ModelSpec::gcn(vec![3, 4, 2], Activation::Tanh, 2);
        spec.normalization = NormMode::Laplacian;
        let art = spec.init(seed).unwrap();
        let plan = partition_even(&bundle.graph, 1, PartitionOptions::default()).unwrap();
        let targets: Vec<u32> = (0..16).collect();
        let view = build_view(&bundle.graph, &targets, 2, None, 0);
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
                ..Default::default()
            },
        )
        .unwrap();
        let dg = DenseGraph::from_graph(&bundle.graph);
        let weights = vec![art.params.value(0).clone(), art.params.value(1).clone()];
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
        for (v, row) in &out.logits {
            for (a, b) in row.iter().zip(want.row(*v as usize)) {
                worst = worst.max((a - b).abs() as f64);
            }
        }
    }
    if worst < 1e-10 {
        Ok(format!("max abs diff {worst:.2e}"))
    } else {
        Err(format!("max abs diff {worst:.2e}"))
    }
}

fn chebyshev_check(seed: u64) -> CheckResult {
    let bundle = random_bundle(&RandomGraphSpec {
        nodes: 6,
        edges: 12,
        feature_dim: 1,
        classes: 2,
        seed,
        symmetric: true,
    });
    let dg = DenseGraph::from_graph(&bundle.graph);
    let lambda = oracle::laplacian_lambda_max(&dg, seed);
    let x = [0.5, -1.0, 0.25, 2.0, -0.75, 1.5];
    let theta = [0.7, -0.3, 0.2];
    let got = oracle::chebyshev_filter(&dg, &x, &theta, lambda);
    // Base cases: K=0 scales, K<=1 matches theta0 x + theta1 (2L/lm - I) x.
    let k0 = oracle::chebyshev_filter(&dg, &x, &[theta[0]], lambda);
    for (a, &b) in k0.iter().zip(&x) {
        if (a - theta[0] * b).abs() > 1e-14 {
            return Err("K=0 base case".into());
        }
    }
    if got.len() != 6 || got.iter().any(|v| !v.is_finite()) {
        return Err("non-finite filter output".into());
    }
    Ok(format!("lambda_max {lambda:.6}"))
}

fn partition_sweep(seed: u64) -> CheckResult {
    let bundle = random_bundle(&RandomGraphSpec {
        nodes: 20,
        edges: 70,
        feature_dim: 4,
        classes: 2,
        seed,
        symmetric: true,
    });
    let spec = ModelSpec::gcn(vec![4, 4, 2], Activation::Tanh, 2);
    let art = spec.init(seed).unwrap();
    let targets: Vec<u32> = (0..20).collect();
    let view = build_view(&bundle.graph, &targets, 2, None, 0);
    let prop = PropWeights::gcn(&bundle.graph, spec.normalization);
    let mut reference: Option<(u64, Vec<Tensor>)> = None;
    for partitions in [1usize, 2, 3, 5] {
        let plan = partition_even(
            &bundle.graph,
            partitions,
            PartitionOptions {
                seed,
                contiguous: false,
            },
        )
        .unwrap();
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
                deterministic: true,
                threaded: partitions > 1,
                ..Default::default()
            },
        )
        .unwrap();
        let grads = out.grads.unwrap();
        match &reference {
            None => reference = Some((out.loss.to_bits(), grads)),
            Some((loss_bits, ref_grads)) => {
                if out.loss.to_bits() != *loss_bits {
                    return Err(format!("loss bits differ at P={partitions}"));
                }
                for (a, b) in grads.iter().zip(ref_grads) {
                    for (x, y) in a.data().iter().zip(b.data()) {
                        if x.to_bits() != y.to_bits() {
                            return Err(format!("grad bits differ at P={partitions}"));
                        }
                    }
                }
            }
        }
    }
    Ok("bitwise identical for P in {1,2,3,5}".into())
}

pub fn run(args: &GradcheckArgs) -> Result<u8> {
    let seed = args.seed;
    let fault = CheckOpts {
        negate_analytic: args.inject_fault,
        ..Default::default()
    };
    let gcn_bundle = random_bundle(&RandomGraphSpec {
        nodes: 6,
        edges: 16,
        feature_dim: 3,
        classes: 2,
        seed,
        symmetric: true,
    });
    let mut gcn2 = ModelSpec::gcn(vec![3, 4, 2], Activation::Tanh, 2);
    gcn2.normalization = NormMode::Laplacian;
    let gcn1 = {
        // Composed projection -> propagation -> relu apply on a 5-node graph.
        let mut s = ModelSpec::gcn(vec![3, 3], Activation::Relu, 2);
        s.activations = vec![Activation::Relu];
        s
    };
    let five = random_bundle(&RandomGraphSpec {
        nodes: 5,
        edges: 12,
        feature_dim: 3,
        classes: 2,
        seed: seed + 1,
        symmetric: true,
    });
    let gat_bundle = random_edge_featured_bundle(
        &RandomGraphSpec {
            nodes: 5,
            edges: 12,
            feature_dim: 3,
            classes: 2,
            seed: seed + 2,
            symmetric: true,
        },
        3,
    );
    let mut gat = ModelSpec::gat_edge(vec![3, 4], Activation::Tanh, 2, 3, 2);
    gat.acc = AccKind::AttentionSoftmax;

    let checks: Vec<(&str, Result<CheckResult>)> = vec![
        ("linear_gradcheck", linear_gradcheck(seed, fault)),
        ("relu_subgradient", Ok(relu_subgradient())),
        ("tanh_gradcheck", tanh_gradcheck(seed)),
        ("elementwise_gradcheck", elementwise_gradcheck(seed)),
        ("softmax_closed_forms", Ok(softmax_closed_forms())),
        ("softmax_gradcheck", softmax_gradcheck(seed)),
        (
            "composed_projection_propagation_fd",
            engine_fd(&five, &gcn1, seed, 1).map(|e| fd_result(e, 1e-5)),
        ),
        (
            "gcn_two_layer_fd",
            engine_fd(&gcn_bundle, &gcn2, seed, 1).map(|e| fd_result(e, 1e-5)),
        ),
        (
            "gcn_two_layer_fd_partitioned",
            engine_fd(&gcn_bundle, &gcn2, seed, 3).map(|e| fd_result(e, 1e-5)),
        ),
        (
            "edge_attention_fd",
            engine_fd(&gat_bundle, &gat, seed, 2).map(|e| fd_result(e, 1e-5)),
        ),
        ("engine_vs_dense_forward", Ok(engine_vs_dense(seed, 10))),
        ("chebyshev_filter", Ok(chebyshev_check(seed))),
        ("partition_sweep_bitwise", Ok(partition_sweep(seed))),
    ];

    let mut failures = 0;
    let mut reported = 0;
    for (name, outcome) in checks {
        reported += 1;
        match outcome {
            Ok(Ok(detail)) => println!("PASS {name}: {detail}"),
            Ok(Err(detail)) => {
                failures += 1;
                println!("FAIL {name}: {detail}");
            }
            Err(e) => {
                failures += 1;
                println!("FAIL {name}: error {e}");
            }
        }
    }
    println!("{reported} checks, {failures} failures");
    Ok(if failures > 0 { 2 } else { 0 })
}
