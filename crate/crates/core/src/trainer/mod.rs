//! End-to-end training: batch selection per strategy, K-hop view
//! construction, step execution under a parameter version, optimizer
//! updates, metrics, checkpoints, and the async scheduler path.

pub mod checkpoint;
pub mod params;
pub mod scheduler;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cluster::ClusterAssignment;
use crate::engine::{self, Counters, Decoder, EngineConfig, LayerProgram, TaskContext};
use crate::error::{CoreError, Result};
use crate::graph::{DatasetBundle, NodeId, PropWeights};
use crate::models::{LayerKind, ModelSpec};
use crate::nn::{ParamId, ParameterSet};
use crate::partition::{partition_even, PartitionOptions, PartitionPlan};
use crate::tensor::{Real, Tensor};
use crate::view::{build_view, GraphView, SamplerConfig};

pub use checkpoint::{load_into, read_checkpoint, write_checkpoint, Checkpoint};
pub use params::{OptimizerKind, ParameterManager, ParameterVersion};
pub use scheduler::{schedule, ScheduleLog, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Global,
    Mini,
    Cluster,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Global => "global",
            Strategy::Mini => "mini",
            Strategy::Cluster => "cluster",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Strategy::Global),
            "mini" => Ok(Strategy::Mini),
            "cluster" => Ok(Strategy::Cluster),
            other => Err(CoreError::Config(format!("unknown strategy {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    Sync,
    /// Concurrent steps against possibly stale versions; staleness is
    /// bounded by the concurrency and reported, not coordinated.
    Async { concurrency: usize },
}

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub strategy: Strategy,
    /// Steps (epochs under the global strategy).
    pub steps: usize,
    pub optimizer: OptimizerKind,
    /// Fraction of labeled train nodes per mini batch.
    pub batch_fraction: f64,
    /// Clusters per cluster batch.
    pub clusters_per_batch: usize,
    pub update_mode: UpdateMode,
    pub sampler: Option<SamplerConfig>,
    pub seed: u64,
    pub deterministic: bool,
    /// Validation cadence in steps.
    pub eval_every: usize,
    /// Early stop after this many evaluations without improvement (0 = off).
    pub patience: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Global,
            steps: 100,
            optimizer: OptimizerKind::Adam {
                lr: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            batch_fraction: 0.1,
            clusters_per_batch: 1,
            update_mode: UpdateMode::Sync,
            sampler: None,
            seed: 0,
            deterministic: false,
            eval_every: 1,
            patience: 50,
        }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51afd7ed558ccd);
    x ^= x >> 33;
    x
}

/// Picks the target node set for one step under the configured strategy.
pub fn select_batch(
    strategy: Strategy,
    bundle: &DatasetBundle,
    clusters: Option<&ClusterAssignment>,
    batch_fraction: f64,
    clusters_per_batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<NodeId>> {
    if bundle.train_mask.is_empty() {
        return Err(CoreError::Config("no labeled train nodes".into()));
    }
    let batch = match strategy {
        Strategy::Global => bundle.train_mask.clone(),
        Strategy::Mini => {
            let n = bundle.train_mask.len();
            let k = ((batch_fraction * n as f64).floor() as usize).clamp(1, n);
            let mut chosen: Vec<NodeId> = bundle
                .train_mask
                .choose_multiple(rng, k)
                .copied()
                .collect();
            chosen.sort_unstable();
            chosen
        }
        Strategy::Cluster => {
            let clusters = clusters.ok_or_else(|| {
                CoreError::Config("cluster strategy requires a cluster assignment".into())
            })?;
            let gamma = clusters_per_batch.clamp(1, clusters.cluster_count);
            let ids: Vec<u32> = (0..clusters.cluster_count as u32).collect();
            // Redraw on an unlabeled pick; only an entirely unlabeled
            // clustering is an error.
            for _ in 0..clusters.cluster_count.max(1) {
                let chosen: Vec<u32> = ids.choose_multiple(rng, gamma).copied().collect();
                let mut batch: Vec<NodeId> = bundle
                    .train_mask
                    .iter()
                    .copied()
                    .filter(|&v| chosen.contains(&clusters.cluster_of[v as usize]))
                    .collect();
                if !batch.is_empty() {
                    batch.sort_unstable();
                    return Ok(batch);
                }
            }
            return Err(CoreError::Config(
                "no cluster contains labeled train nodes".into(),
            ));
        }
    };
    if batch.is_empty() {
        return Err(CoreError::Config("empty batch".into()));
    }
    Ok(batch)
}

/// Everything fixed across a training run: layout, programs, propagation
/// coefficients and the parameter manager.
pub struct Session {
    pub plan: PartitionPlan,
    pub programs: Vec<LayerProgram>,
    pub decoder: Decoder,
    pub prop: PropWeights,
    pub regularized: Vec<ParamId>,
    pub l2: Real,
    pub manager: ParameterManager,
    pub spec_hash: String,
    pub layer_count: usize,
}

/// One executed step's results.
#[derive(Debug)]
pub struct StepResult {
    /// Loss including the L2 term.
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub train_hits: usize,
    pub train_total: usize,
    pub counters: Counters,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub hits: usize,
    pub total: usize,
}

impl Session {
    pub fn new(
        bundle: &DatasetBundle,
        model: &ModelSpec,
        config: &TrainingConfig,
        partitions: usize,
        contiguous: bool,
    ) -> Result<Session> {
        let art = model.init(config.seed)?;
        let plan = partition_even(
            &bundle.graph,
            partitions,
            PartitionOptions {
                seed: config.seed,
                contiguous,
            },
        )?;
        let prop = match model.kind {
            LayerKind::Gcn => PropWeights::gcn(&bundle.graph, model.normalization),
            LayerKind::GatEdge => PropWeights::unit(&bundle.graph),
        };
        Ok(Session {
            plan,
            programs: art.programs,
            decoder: art.decoder,
            prop,
            regularized: art.regularized,
            l2: model.l2,
            manager: ParameterManager::new(art.params, config.optimizer),
            spec_hash: model.spec_hash(),
            layer_count: model.layer_count(),
        })
    }

    /// Forward + backward over one view under a fixed parameter snapshot;
    /// never mutates the snapshot.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &self,
        bundle: &DatasetBundle,
        view: &GraphView,
        version: &ParameterVersion,
        deterministic: bool,
        threaded: bool,
        dropout_on: bool,
        step_seed: u64,
        step_index: usize,
    ) -> Result<StepResult> {
        let ctx = TaskContext {
            graph: &bundle.graph,
            view,
            plan: &self.plan,
            programs: &self.programs,
            decoder: self.decoder,
            params: &version.params,
            prop: &self.prop,
        };
        let cfg = EngineConfig {
            deterministic,
            threaded,
            dropout_on,
            step_seed,
            backward: true,
            collect_logits: false,
            collect_input_grads: false,
        };
        let outcome = engine::run_task(&ctx, &cfg).map_err(|e| match e {
            CoreError::NonFinite { op } => CoreError::Numerical {
                step: step_index,
                msg: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        let mut grads = outcome.grads.expect("backward requested");
        let mut loss = outcome.loss;
        // L2 penalty on regularized parameters: 0.5 * l2 * ||W||^2.
        if self.l2 > 0.0 {
            loss += 0.5 * self.l2 as f64 * version.params.sq_norm(&self.regularized);
            for &id in &self.regularized {
                let w = version.params.value(id);
                let g = &mut grads[id];
                for (gv, &wv) in g.data_mut().iter_mut().zip(w.data()) {
                    *gv += self.l2 * wv;
                }
            }
        }
        if !loss.is_finite() {
            return Err(CoreError::Numerical {
                step: step_index,
                msg: "non-finite loss".into(),
            });
        }
        Ok(StepResult {
            loss,
            grads,
            train_hits: outcome.train_hits,
            train_total: outcome.train_total,
            counters: outcome.counters,
        })
    }

    /// Strategy-free inference over the full graph: accuracy and macro-F1 on
    /// the given labeled split.
    pub fn evaluate(
        &self,
        bundle: &DatasetBundle,
        params: &ParameterSet,
        split: &[NodeId],
        class_count: usize,
    ) -> Result<EvalReport> {
        if split.is_empty() {
            return Ok(EvalReport {
                accuracy: 0.0,
                macro_f1: 0.0,
                hits: 0,
                total: 0,
            });
        }
        let view = build_view(&bundle.graph, split, self.layer_count, None, 0);
        let ctx = TaskContext {
            graph: &bundle.graph,
            view: &view,
            plan: &self.plan,
            programs: &self.programs,
            decoder: self.decoder,
            params,
            prop: &self.prop,
        };
        let cfg = EngineConfig {
            backward: false,
            collect_logits: true,
            threaded: self.plan.partition_count > 1,
            ..Default::default()
        };
        let outcome = engine::run_task(&ctx, &cfg)?;
        let mut tp = vec![0usize; class_count];
        let mut fp = vec![0usize; class_count];
        let mut fn_ = vec![0usize; class_count];
        let mut hits = 0;
        let mut total = 0;
        for (v, logits) in &outcome.logits {
            let Some(label) = bundle.graph.labels[*v as usize] else {
                continue;
            };
            let pred = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i as u32)
                .unwrap();
            total += 1;
            if pred == label {
                hits += 1;
                tp[pred as usize] += 1;
            } else {
                fp[pred as usize] += 1;
                fn_[label as usize] += 1;
            }
        }
        let mut f1_sum = 0.0;
        for c in 0..class_count {
            let p = tp[c] as f64 / (tp[c] + fp[c]).max(1) as f64;
            let r = tp[c] as f64 / (tp[c] + fn_[c]).max(1) as f64;
            if p + r > 0.0 {
                f1_sum += 2.0 * p * r / (p + r);
            }
        }
        Ok(EvalReport {
            accuracy: hits as f64 / total.max(1) as f64,
            macro_f1: f1_sum / class_count as f64,
            hits,
            total,
        })
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

pub struct TrainOptions<'a> {
    pub bundle: &'a DatasetBundle,
    pub model: &'a ModelSpec,
    pub config: &'a TrainingConfig,
    pub partitions: usize,
    pub contiguous_partitions: bool,
    pub clusters: Option<&'a ClusterAssignment>,
    pub metrics_path: Option<&'a Path>,
    pub checkpoint_best: Option<&'a Path>,
    pub checkpoint_final: Option<&'a Path>,
    /// Cooperative stop flag (e.g. from a signal handler): the loop breaks
    /// at the next step boundary and checkpoints what it has.
    pub stop: Option<&'a std::sync::atomic::AtomicBool>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_loss: f64,
    /// Full-graph train-split accuracy of the final parameters.
    pub final_train_acc: f64,
    pub best_val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub test_macro_f1: Option<f64>,
    pub final_version: u64,
    pub total_messages: u64,
    pub wall_ms_total: u64,
    pub stopped_early: bool,
    pub mean_staleness: f64,
    /// Per-step losses, for degeneracy comparisons in tests.
    pub losses: Vec<f64>,
    /// Aggregated engine instrumentation over all executed steps.
    pub counters: Counters,
}

struct MetricsRow {
    step: usize,
    loss: f64,
    train_acc: f64,
    val_acc: Option<f64>,
    msgs: u64,
    wall_ms: u64,
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let io = |e: std::io::Error| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    (|| -> std::io::Result<()> {
        writeln!(w, "step\tloss\ttrain_acc\tval_acc\tmsgs\twall_ms")?;
        for r in rows {
            let val = r
                .val_acc
                .map(|v| format!("{v}"))
                .unwrap_or_else(|| "-".to_string());
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.step, r.loss, r.train_acc, val, r.msgs, r.wall_ms
            )?;
        }
        w.flush()
    })()
    .map_err(io)
}

/// Runs the configured number of steps (epochs for global batch), tracking
/// the best validation parameters and writing metrics/checkpoints.
pub fn run_training(opts: &TrainOptions) -> Result<TrainReport> {
    let cfg = opts.config;
    let session = Session::new(
        opts.bundle,
        opts.model,
        cfg,
        opts.partitions,
        opts.contiguous_partitions,
    )?;
    match cfg.update_mode {
        UpdateMode::Sync => run_sync(opts, &session),
        UpdateMode::Async { concurrency } => {
            if cfg.deterministic {
                // Deterministic mode disables concurrent batches.
                run_sync(opts, &session)
            } else {
                run_async(opts, &session, concurrency)
            }
        }
    }
}

fn run_sync(opts: &TrainOptions, session: &Session) -> Result<TrainReport> {
    let cfg = opts.config;
    let bundle = opts.bundle;
    let dropout_on = opts.model.dropout_keep < 1.0;
    let threaded = opts.partitions > 1;
    let mut rows: Vec<MetricsRow> = Vec::with_capacity(cfg.steps);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut best: Option<(f64, ParameterVersion, u64)> = None;
    let mut evals_since_best = 0usize;
    let mut last_val: Option<f64> = None;
    let mut total_msgs = 0u64;
    let mut total_counters = Counters::default();
    let mut total_wall = 0u64;
    let mut staleness_sum = 0u64;
    let mut stopped_early = false;
    let t_run = Instant::now();

    let mut steps_run = 0usize;
    for step in 0..cfg.steps {
        if let Some(stop) = opts.stop {
            if stop.load(std::sync::atomic::Ordering::Relaxed) {
                stopped_early = true;
                break;
            }
        }
        let t0 = Instant::now();
        let step_seed = mix(cfg.seed, step as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        let targets = select_batch(
            cfg.strategy,
            bundle,
            opts.clusters,
            cfg.batch_fraction,
            cfg.clusters_per_batch,
            &mut rng,
        )?;
        let view = build_view(
            &bundle.graph,
            &targets,
            session.layer_count,
            cfg.sampler.as_ref(),
            step_seed,
        );
        let version = session.manager.latest();
        let result = session.train_step(
            bundle,
            &view,
            &version,
            cfg.deterministic,
            threaded && !cfg.deterministic,
            dropout_on,
            step_seed,
            step,
        )?;
        let (_, staleness) = session.manager.update(&result.grads, version.version);
        staleness_sum += staleness;
        let msgs = result.counters.total_messages();
        total_msgs += msgs;
        total_counters.merge(&result.counters);
        let wall_ms = if cfg.deterministic {
            // Timing varies run to run; zeroing the column keeps
            // deterministic metrics files bit-identical.
            0
        } else {
            t0.elapsed().as_millis() as u64
        };
        total_wall += t0.elapsed().as_millis() as u64;
        losses.push(result.loss);
        steps_run += 1;

        let do_eval = (step + 1) % cfg.eval_every.max(1) == 0 || step + 1 == cfg.steps;
        if do_eval && !bundle.validation_mask.is_empty() {
            let latest = session.manager.latest();
            let val = session.evaluate(
                bundle,
                &latest.params,
                &bundle.validation_mask,
                bundle.class_count,
            )?;
            last_val = Some(val.accuracy);
            let improved = best.as_ref().is_none_or(|(b, _, _)| val.accuracy > *b);
            if improved {
                best = Some((val.accuracy, latest, step as u64));
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
            }
        }
        rows.push(MetricsRow {
            step,
            loss: result.loss,
            train_acc: result.train_hits as f64 / result.train_total.max(1) as f64,
            val_acc: last_val,
            msgs,
            wall_ms,
        });
        if cfg.patience > 0 && evals_since_best >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    if let Some(path) = opts.metrics_path {
        write_metrics(path, &rows)?;
    }
    finish_report(
        opts,
        session,
        losses,
        best,
        steps_run,
        total_msgs,
        total_wall.max(t_run.elapsed().as_millis() as u64),
        stopped_early,
        staleness_sum,
        total_counters,
    )
}

fn run_async(opts: &TrainOptions, session: &Session, concurrency: usize) -> Result<TrainReport> {
    let cfg = opts.config;
    let bundle = opts.bundle;
    let dropout_on = opts.model.dropout_keep < 1.0;
    let steps = cfg.steps;
    let rows: Mutex<Vec<MetricsRow>> = Mutex::new(Vec::with_capacity(steps));
    let counter_total: Mutex<Counters> = Mutex::new(Counters::default());
    let staleness_sum = Mutex::new(0u64);
    let first_error: Mutex<Option<CoreError>> = Mutex::new(None);
    let grads_slots: Vec<Mutex<Option<(StepResult, u64, u64)>>> =
        (0..steps).map(|_| Mutex::new(None)).collect();
    let t_run = Instant::now();

    // Two units per step: compute (forward+backward against the version
    // fetched at unit start) and update (optimizer application at arrival).
    let mut tasks: Vec<TaskSpec> = Vec::with_capacity(steps * 2);
    for step in 0..steps {
        let session_ref: &Session = session;
        let slots = &grads_slots;
        let errs = &first_error;
        let opts_clusters = opts.clusters;
        tasks.push(TaskSpec {
            deps: vec![],
            assign: Some(step % concurrency.max(1)),
            run: Box::new(move || {
                let t0 = Instant::now();
                let step_seed = mix(cfg.seed, step as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
                let work = (|| -> Result<(StepResult, u64, u64)> {
                    let targets = select_batch(
                        cfg.strategy,
                        bundle,
                        opts_clusters,
                        cfg.batch_fraction,
                        cfg.clusters_per_batch,
                        &mut rng,
                    )?;
                    let view = build_view(
                        &bundle.graph,
                        &targets,
                        session_ref.layer_count,
                        cfg.sampler.as_ref(),
                        step_seed,
                    );
                    let version = session_ref.manager.latest();
                    let result = session_ref.train_step(
                        bundle, &view, &version, false, false, dropout_on, step_seed, step,
                    )?;
                    Ok((result, version.version, t0.elapsed().as_millis() as u64))
                })();
                match work {
                    Ok(v) => *slots[step].lock().unwrap() = Some(v),
                    Err(e) => {
                        let mut guard = errs.lock().unwrap();
                        if guard.is_none() {
                            *guard = Some(e);
                        }
                    }
                }
            }),
        });
    }
    for step in 0..steps {
        let session_ref: &Session = session;
        let slots = &grads_slots;
        let rows_ref = &rows;
        let staleness_ref = &staleness_sum;
        let counters_ref = &counter_total;
        tasks.push(TaskSpec {
            deps: vec![step],
            assign: None,
            run: Box::new(move || {
                let Some((result, base_version, wall_ms)) = slots[step].lock().unwrap().take()
                else {
                    return; // compute failed; error already recorded
                };
                let (_, staleness) = session_ref.manager.update(&result.grads, base_version);
                *staleness_ref.lock().unwrap() += staleness;
                counters_ref.lock().unwrap().merge(&result.counters);
                rows_ref.lock().unwrap().push(MetricsRow {
                    step,
                    loss: result.loss,
                    train_acc: result.train_hits as f64 / result.train_total.max(1) as f64,
                    val_acc: None,
                    msgs: result.counters.total_messages(),
                    wall_ms,
                });
            }),
        });
    }
    schedule(tasks, concurrency.max(1), false)?;
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }

    let mut rows = rows.into_inner().unwrap();
    rows.sort_by_key(|r| r.step);
    let losses: Vec<f64> = rows.iter().map(|r| r.loss).collect();
    let total_msgs: u64 = rows.iter().map(|r| r.msgs).sum();
    if let Some(path) = opts.metrics_path {
        write_metrics(path, &rows)?;
    }
    let staleness_total = *staleness_sum.lock().unwrap();
    let counters = counter_total.into_inner().unwrap();
    finish_report(
        opts,
        session,
        losses,
        None,
        steps,
        total_msgs,
        t_run.elapsed().as_millis() as u64,
        false,
        staleness_total,
        counters,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish_report(
    opts: &TrainOptions,
    session: &Session,
    losses: Vec<f64>,
    best: Option<(f64, ParameterVersion, u64)>,
    steps_run: usize,
    total_msgs: u64,
    wall_ms_total: u64,
    stopped_early: bool,
    staleness_sum: u64,
    counters: Counters,
) -> Result<TrainReport> {
    let bundle = opts.bundle;
    let latest = session.manager.latest();
    let chosen = best
        .as_ref()
        .map(|(_, v, _)| v.clone())
        .unwrap_or_else(|| latest.clone());

    if let Some(path) = opts.checkpoint_best {
        let step = best.as_ref().map(|&(_, _, s)| s).unwrap_or(0);
        write_checkpoint(path, &session.spec_hash, chosen.version, step, &chosen.params)?;
    }
    if let Some(path) = opts.checkpoint_final {
        write_checkpoint(
            path,
            &session.spec_hash,
            latest.version,
            steps_run as u64,
            &latest.params,
        )?;
    }

    let final_train = session.evaluate(
        bundle,
        &chosen.params,
        &bundle.train_mask,
        bundle.class_count,
    )?;
    let test = if bundle.test_mask.is_empty() {
        None
    } else {
        Some(session.evaluate(bundle, &chosen.params, &bundle.test_mask, bundle.class_count)?)
    };
    Ok(TrainReport {
        steps_run,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        final_train_acc: final_train.accuracy,
        best_val_acc: best.as_ref().map(|&(b, _, _)| b),
        test_acc: test.as_ref().map(|t| t.accuracy),
        test_macro_f1: test.as_ref().map(|t| t.macro_f1),
        final_version: latest.version,
        total_messages: total_msgs,
        wall_ms_total,
        stopped_early,
        mean_staleness: staleness_sum as f64 / steps_run.max(1) as f64,
        losses,
        counters,
    })
}

/// Average number of distinct nodes touched per target across the given
/// batches at depth K (redundancy comparison between batching strategies).
pub fn average_touched_per_target(
    bundle: &DatasetBundle,
    layer_count: usize,
    batches: &[Vec<NodeId>],
) -> f64 {
    let mut touched = 0usize;
    let mut targets = 0usize;
    for batch in batches {
        if batch.is_empty() {
            continue;
        }
        let view = build_view(&bundle.graph, batch, layer_count, None, 0);
        touched += view.node_count();
        targets += view.targets.len();
    }
    touched as f64 / targets.max(1) as f64
}
