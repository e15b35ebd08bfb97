//! Staged execution of GNN layers across partition workers.
//!
//! One layer runs as transform (per master node), gather (per owned edge,
//! CSR pass for master destinations and CSC pass for mirror destinations),
//! accumulate, and apply (masters only; mirrors refresh lazily at the next
//! layer's sync). Cross-partition traffic flows only along master-mirror
//! pairs: one value message per (master, mirror partition) and one partial
//! accumulation back per mirror. The backward pass replays the same stages
//! in reverse, and a final reduce folds every partition's parameter-gradient
//! contributions together.
//!
//! Workers share nothing mutable; the same phase code runs whether workers
//! occupy one thread (inline driver) or a thread each (threaded driver). In
//! deterministic mode every cross-partition accumulation uses exact
//! fixed-point summation, which makes losses and reduced gradients
//! bit-identical across partition counts.

pub mod program;
pub mod transport;

use std::collections::HashMap;
use std::sync::mpsc::Receiver;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::exact::{ExactAcc, ExactVec};
use crate::graph::{EdgeId, Graph, NodeId, PropWeights};
use crate::nn::{GradSink, ParameterSet, Tape};
use crate::partition::{PartitionId, PartitionPlan};
use crate::tensor::{Real, Tensor};
use crate::view::GraphView;

pub use program::{
    identity_program, AccKind, Decoder, DiagPlusMsgApply, EdgeAttentionScore, EdgeGather,
    LayerProgram, LinearTransform, MsgOnlyApply, NodeApply, NodeTransform, ScaleSourceGather,
};
pub use transport::{Counters, Envelope, Payload, Round, Transport};

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Exact cross-partition accumulation: losses and reduced gradients
    /// come out bit-identical across partition counts and thread schedules.
    /// (The trainer additionally serializes concurrent tasks in this mode.)
    pub deterministic: bool,
    /// One OS thread per partition worker (otherwise workers take turns in
    /// the calling thread).
    pub threaded: bool,
    /// Apply transform-input dropout (training only).
    pub dropout_on: bool,
    /// Seed for per-step randomness (dropout masks).
    pub step_seed: u64,
    /// Run the backward passes and produce reduced gradients.
    pub backward: bool,
    /// Return decoder logits for every target.
    pub collect_logits: bool,
    /// Return dL/dX assembled over the view (test instrumentation).
    pub collect_input_grads: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            deterministic: false,
            threaded: false,
            dropout_on: false,
            step_seed: 0,
            backward: true,
            collect_logits: false,
            collect_input_grads: false,
        }
    }
}

pub struct TaskContext<'a> {
    pub graph: &'a Graph,
    pub view: &'a GraphView,
    pub plan: &'a PartitionPlan,
    pub programs: &'a [LayerProgram],
    pub decoder: Decoder,
    pub params: &'a ParameterSet,
    pub prop: &'a PropWeights,
}

#[derive(Debug)]
pub struct TaskOutcome {
    /// Mean cross-entropy over the batch targets (no regularization term).
    pub loss: f64,
    /// Reduced parameter gradients, aligned with the parameter set.
    pub grads: Option<Vec<Tensor>>,
    pub counters: Counters,
    /// Correct predictions among labeled targets.
    pub train_hits: usize,
    pub train_total: usize,
    /// (node, logits) per target when requested.
    pub logits: Vec<(NodeId, Vec<Real>)>,
    /// dL/dX over the whole node set when requested (inactive rows zero).
    pub input_grads: Option<Tensor>,
}

// ---------------------------------------------------------------------------
// Communication plan
// ---------------------------------------------------------------------------

/// Mirror bookkeeping shared by all workers: who syncs what, up to which
/// layer. Both endpoints derive identical lists, so receive counts need no
/// negotiation.
struct CommPlan {
    /// Per host partition: (mirror node, master partition, highest layer
    /// with an active owned in-edge).
    hosted: Vec<Vec<(NodeId, PartitionId, i16)>>,
    /// Per master partition: (master node, host partition, same bound).
    outbound: Vec<Vec<(NodeId, PartitionId, i16)>>,
}

impl CommPlan {
    fn build(graph: &Graph, view: &GraphView, plan: &PartitionPlan) -> Self {
        let parts = plan.partition_count;
        let mut hosted: Vec<Vec<(NodeId, PartitionId, i16)>> = vec![Vec::new(); parts];
        let mut outbound: Vec<Vec<(NodeId, PartitionId, i16)>> = vec![Vec::new(); parts];
        #[allow(clippy::needless_range_loop)]
        for p in 0..parts {
            for &m in &plan.mirrors_of[p] {
                if !view.is_active(m) {
                    continue;
                }
                let ml_m = view.max_layer[m as usize];
                let mut upto: i16 = 0;
                let (sources, ids) = graph.csc.row(m);
                for (&j, &e) in sources.iter().zip(ids) {
                    if plan.master_of[j as usize] != p {
                        continue;
                    }
                    let ml_j = view.max_layer[j as usize];
                    if ml_j < 0 {
                        continue;
                    }
                    if let Some(map) = &view.sampled_in {
                        if !map.get(&m).is_some_and(|s| s.binary_search(&e).is_ok()) {
                            continue;
                        }
                    }
                    upto = upto.max(ml_m.min(ml_j + 1));
                }
                if upto >= 1 {
                    let q = plan.master_of[m as usize];
                    hosted[p].push((m, q, upto));
                    outbound[q].push((m, p, upto));
                }
            }
            hosted[p].sort_unstable();
        }
        for list in &mut outbound {
            list.sort_unstable();
        }
        Self { hosted, outbound }
    }

    /// Entries partition `p` expects to receive as value syncs at layer `k`.
    fn expected_syncs(&self, p: PartitionId, k: usize) -> usize {
        self.hosted[p].iter().filter(|&&(_, _, u)| u >= k as i16).count()
    }

    /// Entries partition `p` expects back as partials at layer `k`.
    fn expected_partials(&self, p: PartitionId, k: usize) -> usize {
        self.outbound[p]
            .iter()
            .filter(|&&(_, _, u)| u >= k as i16)
            .count()
    }
}

// ---------------------------------------------------------------------------
// Accumulators
// ---------------------------------------------------------------------------

/// Per-row accumulator: plain additions in fast mode, exact fixed-point in
/// deterministic mode.
enum RowAcc {
    Fast(Vec<Real>),
    Exact(ExactVec),
}

impl RowAcc {
    fn new(det: bool, len: usize) -> Self {
        if det {
            RowAcc::Exact(ExactVec::zeros(len))
        } else {
            RowAcc::Fast(vec![0.0; len])
        }
    }

    fn add_slice(&mut self, xs: &[Real]) {
        match self {
            RowAcc::Fast(v) => {
                for (a, &x) in v.iter_mut().zip(xs) {
                    *a += x;
                }
            }
            RowAcc::Exact(e) => {
                for (a, &x) in e.accs.iter_mut().zip(xs) {
                    a.add(x as f64);
                }
            }
        }
    }

    fn merge_payload(&mut self, payload: &Payload) {
        match (self, payload) {
            (RowAcc::Fast(v), Payload::Dense(xs)) => {
                for (a, &x) in v.iter_mut().zip(xs) {
                    *a += x;
                }
            }
            (RowAcc::Exact(e), Payload::Exact(o)) => e.merge(o),
            _ => panic!("payload mode mismatch"),
        }
    }

    fn to_payload(&self) -> Payload {
        match self {
            RowAcc::Fast(v) => Payload::Dense(v.clone()),
            RowAcc::Exact(e) => Payload::Exact(e.clone()),
        }
    }

    fn finalize(&self) -> Vec<Real> {
        match self {
            RowAcc::Fast(v) => v.clone(),
            RowAcc::Exact(e) => e.round_vec().iter().map(|&x| x as Real).collect(),
        }
    }
}

// One instance per worker; boxing the wide variant buys nothing.
#[allow(clippy::large_enum_variant)]
enum LossAcc {
    Fast(f64),
    Exact(ExactAcc),
}

impl LossAcc {
    fn new(det: bool) -> Self {
        if det {
            LossAcc::Exact(ExactAcc::new())
        } else {
            LossAcc::Fast(0.0)
        }
    }

    fn add(&mut self, x: f64) {
        match self {
            LossAcc::Fast(v) => *v += x,
            LossAcc::Exact(e) => e.add(x),
        }
    }

    fn merge(&mut self, other: &LossAcc) {
        match (self, other) {
            (LossAcc::Fast(a), LossAcc::Fast(b)) => *a += b,
            (LossAcc::Exact(a), LossAcc::Exact(b)) => a.merge(b),
            _ => panic!("loss mode mismatch"),
        }
    }

    fn value(&self) -> f64 {
        match self {
            LossAcc::Fast(v) => *v,
            LossAcc::Exact(e) => e.round(),
        }
    }
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e3779b97f4a7c15) ^ c.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Inverted-dropout mask derived from (step seed, layer, global node id):
/// identical for a node no matter which partition hosts it.
fn dropout_mask(step_seed: u64, layer: usize, node: NodeId, dim: usize, keep: Real) -> Vec<Real> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(step_seed, layer as u64, node as u64));
    (0..dim)
        .map(|_| {
            if rng.gen::<f64>() < keep as f64 {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Worker
// ---------------------------------------------------------------------------

/// Per-task, per-node tensor storage; allocated at task start and released
/// when the task completes.
struct Frame {
    /// h^0..h^K over local master rows.
    h: Vec<Tensor>,
    /// n^k (projection outputs), 1-based by layer.
    n: Vec<Tensor>,
    /// Finalized accumulated messages per layer.
    msg: Vec<Tensor>,
    /// Gradients dL/dh^k.
    grad_h: Vec<Tensor>,
    /// Attention: per layer, per local row, softmax normalizer Z.
    attn_z: Vec<Vec<Real>>,
    /// Attention: per layer, per local row, score max.
    attn_max: Vec<Vec<Real>>,
    /// Mirror transient state: received master values per layer.
    mirror_n: Vec<HashMap<NodeId, Vec<Real>>>,
    /// Attention: received per-mirror score max per layer.
    mirror_max: Vec<HashMap<NodeId, Vec<Real>>>,
    /// Per (layer, edge) saved attention score and exp-weight.
    edge_scores: HashMap<(usize, EdgeId), (Real, Real)>,
}

struct Worker<'a> {
    p: PartitionId,
    ctx: &'a TaskContext<'a>,
    cfg: &'a EngineConfig,
    comm: &'a CommPlan,
    /// Active master nodes of this partition, ascending.
    locals: Vec<NodeId>,
    lrow: HashMap<NodeId, usize>,
    senders: Vec<std::sync::mpsc::Sender<Envelope>>,
    rx: Receiver<Envelope>,
    frame: Frame,
    sink: GradSink,
    counters: Counters,
    tape: Tape,
    /// Current layer's local master accumulators.
    acc: Vec<Option<RowAcc>>,
    /// Current layer's mirror partial accumulators.
    mirror_acc: HashMap<NodeId, RowAcc>,
    /// Attention: per-mirror running score max (current layer).
    mirror_max_acc: HashMap<NodeId, Real>,
    /// Envelopes that arrived ahead of their phase (threaded mode).
    pending: Vec<Envelope>,
    /// Current backward layer's received upstream for mirrors.
    bwd_mirror_upstream: HashMap<NodeId, Vec<Real>>,
    /// Current backward layer's upstream rows for local masters.
    bwd_local_upstream: Vec<Vec<Real>>,
    /// Current backward layer's n-gradient accumulators.
    ngrad: Vec<Option<RowAcc>>,
    ngrad_mirror: HashMap<NodeId, RowAcc>,
    loss: LossAcc,
    hits: usize,
    total: usize,
    logits_out: Vec<(NodeId, Vec<Real>)>,
    err: Option<CoreError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Forward(usize, usize),
    Decode,
    Backward(usize, usize),
}

fn forward_phases(acc: AccKind) -> usize {
    match acc {
        AccKind::Sum | AccKind::Mean { .. } => 3,
        AccKind::AttentionSoftmax => 5,
    }
}

fn build_script(programs: &[LayerProgram], backward: bool) -> Vec<Step> {
    let mut script = Vec::new();
    for (i, prog) in programs.iter().enumerate() {
        let k = i + 1;
        for ph in 0..forward_phases(prog.acc) {
            script.push(Step::Forward(k, ph));
        }
    }
    script.push(Step::Decode);
    if backward {
        for (i, _) in programs.iter().enumerate().rev() {
            let k = i + 1;
            for ph in 0..3 {
                script.push(Step::Backward(k, ph));
            }
        }
    }
    script
}

struct WorkerResult {
    sink: GradSink,
    loss: LossAcc,
    counters: Counters,
    hits: usize,
    total: usize,
    logits: Vec<(NodeId, Vec<Real>)>,
    input_grads: Vec<(NodeId, Vec<Real>)>,
}

impl<'a> Worker<'a> {
    fn new(
        p: PartitionId,
        ctx: &'a TaskContext<'a>,
        cfg: &'a EngineConfig,
        comm: &'a CommPlan,
        senders: Vec<std::sync::mpsc::Sender<Envelope>>,
        rx: Receiver<Envelope>,
    ) -> Self {
        let locals: Vec<NodeId> = ctx.plan.masters_of[p]
            .iter()
            .copied()
            .filter(|&v| ctx.view.is_active(v))
            .collect();
        let lrow: HashMap<NodeId, usize> =
            locals.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let layers = ctx.programs.len();
        let d0 = ctx.programs.first().map_or(0, |p| p.in_dim);
        let mut h = Vec::with_capacity(layers + 1);
        let mut feats = Tensor::zeros(locals.len(), d0);
        for (i, &v) in locals.iter().enumerate() {
            feats
                .row_mut(i)
                .copy_from_slice(ctx.graph.node_features.row(v as usize));
        }
        h.push(feats);
        for prog in ctx.programs {
            h.push(Tensor::zeros(locals.len(), prog.out_dim));
        }
        let n: Vec<Tensor> = std::iter::once(Tensor::zeros(0, 0))
            .chain(
                ctx.programs
                    .iter()
                    .map(|p| Tensor::zeros(locals.len(), p.out_dim)),
            )
            .collect();
        let msg = n.clone();
        let mut grad_h = Vec::with_capacity(layers + 1);
        grad_h.push(Tensor::zeros(locals.len(), d0));
        for prog in ctx.programs {
            grad_h.push(Tensor::zeros(locals.len(), prog.out_dim));
        }
        let mut counters = Counters::with_layers(layers);
        counters.frames_allocated = 1;
        Self {
            p,
            ctx,
            cfg,
            comm,
            locals,
            lrow,
            senders,
            rx,
            frame: Frame {
                h,
                n,
                msg,
                grad_h,
                attn_z: vec![Vec::new(); layers + 1],
                attn_max: vec![Vec::new(); layers + 1],
                mirror_n: vec![HashMap::new(); layers + 1],
                mirror_max: vec![HashMap::new(); layers + 1],
                edge_scores: HashMap::new(),
            },
            sink: GradSink::new(ctx.params, cfg.deterministic),
            counters,
            tape: Tape::new(),
            acc: Vec::new(),
            mirror_acc: HashMap::new(),
            mirror_max_acc: HashMap::new(),
            pending: Vec::new(),
            bwd_mirror_upstream: HashMap::new(),
            bwd_local_upstream: Vec::new(),
            ngrad: Vec::new(),
            ngrad_mirror: HashMap::new(),
            loss: LossAcc::new(cfg.deterministic),
            hits: 0,
            total: 0,
            logits_out: Vec::new(),
            err: None,
        }
    }

    fn prog(&self, k: usize) -> &LayerProgram {
        &self.ctx.programs[k - 1]
    }

    fn fail(&mut self, e: CoreError) {
        if self.err.is_none() {
            self.err = Some(e);
        }
    }

    // -- communication helpers ------------------------------------------------

    fn send_entries(
        &mut self,
        layer: usize,
        backward: bool,
        round: Round,
        partial: bool,
        by_dest: HashMap<PartitionId, Vec<(NodeId, Payload)>>,
    ) {
        for (dest, entries) in by_dest {
            if entries.is_empty() {
                continue;
            }
            let words: usize = entries.iter().map(|(_, p)| p.f64_words()).sum();
            self.counters.bytes += 8 * words as u64;
            let count = entries.len() as u64;
            if partial {
                self.counters.mirror_partials += count;
            } else if backward {
                self.counters.master_mirror_bwd[layer] += count;
            } else {
                self.counters.master_mirror_fwd[layer] += count;
            }
            let env = Envelope {
                from: self.p,
                layer,
                backward,
                round,
                partial,
                entries,
            };
            let _ = self.senders[dest].send(env);
        }
    }

    /// Receives exactly `expected` entries matching (layer, backward, round,
    /// partial), returning them sorted by (node, sender). Envelopes for
    /// later phases (a peer may run ahead) are buffered.
    fn recv_entries(
        &mut self,
        layer: usize,
        backward: bool,
        round: Round,
        partial: bool,
        expected: usize,
    ) -> Vec<(PartitionId, NodeId, Payload)> {
        let matches = |env: &Envelope| {
            env.layer == layer
                && env.backward == backward
                && env.round == round
                && env.partial == partial
        };
        let mut got = Vec::with_capacity(expected);
        let mut i = 0;
        while i < self.pending.len() {
            if matches(&self.pending[i]) {
                let env = self.pending.swap_remove(i);
                for (node, payload) in env.entries {
                    got.push((env.from, node, payload));
                }
            } else {
                i += 1;
            }
        }
        while got.len() < expected {
            let env = self
                .rx
                .recv()
                .expect("transport closed while entries were outstanding");
            if matches(&env) {
                for (node, payload) in env.entries {
                    got.push((env.from, node, payload));
                }
            } else {
                self.pending.push(env);
            }
        }
        got.sort_by_key(|&(from, node, _)| (node, from));
        got
    }

    // -- forward --------------------------------------------------------------

    /// Projection over all local rows, dropout applied to the inputs.
    fn transform_forward(&mut self, k: usize) {
        let prog = self.prog(k);
        let keep = prog.dropout_keep;
        let mut tape = Tape::new();
        let x = tape.input(self.frame.h[k - 1].clone());
        let x = if self.cfg.dropout_on && keep < 1.0 {
            let dim = self.frame.h[k - 1].cols();
            let mut mask = Vec::with_capacity(self.locals.len() * dim);
            for &v in &self.locals {
                mask.extend(dropout_mask(self.cfg.step_seed, k, v, dim, keep));
            }
            tape.dropout(x, mask)
        } else {
            x
        };
        let n = prog.transform.forward(&mut tape, self.ctx.params, x);
        if let Err(e) = tape.take_err() {
            self.fail(e);
            return;
        }
        self.frame.n[k] = tape.value(n).clone();
    }

    /// Sends n-values to every partition hosting a mirror of a local master
    /// that gathers at layer `k`.
    fn send_value_sync(&mut self, k: usize) {
        let mut by_dest: HashMap<PartitionId, Vec<(NodeId, Payload)>> = HashMap::new();
        for &(m, host, upto) in &self.comm.outbound[self.p] {
            if upto < k as i16 {
                continue;
            }
            let row = self.frame.n[k].row(self.lrow[&m]).to_vec();
            by_dest.entry(host).or_default().push((m, Payload::Dense(row)));
        }
        self.send_entries(k, false, Round::Value, false, by_dest);
    }

    fn recv_value_sync(&mut self, k: usize) {
        let expected = self.comm.expected_syncs(self.p, k);
        for (_, node, payload) in self.recv_entries(k, false, Round::Value, false, expected) {
            let Payload::Dense(row) = payload else {
                panic!("value sync must be dense")
            };
            self.frame.mirror_n[k].insert(node, row);
        }
    }

    /// Runs the gather for one edge on the scratch tape and returns the
    /// message tensor (forward value only).
    fn gather_message(
        &mut self,
        k: usize,
        eid: EdgeId,
        src: NodeId,
        dst_row: &[Real],
    ) -> Result<Tensor> {
        let prog = &self.ctx.programs[k - 1];
        self.tape.clear();
        let n_src = {
            let r = self.lrow[&src];
            self.tape.input_row(self.frame.n[k].row(r))
        };
        let n_dst = self.tape.input_row(dst_row);
        let ef = self.ctx.graph.edge_features.as_ref().map(|f| {
            let row = f.row(eid as usize);
            self.tape.input_row(row)
        });
        let coeff = self.ctx.prop.per_edge[eid as usize];
        let out = prog
            .gather
            .forward(&mut self.tape, self.ctx.params, n_src, n_dst, ef, coeff);
        self.tape.take_err()?;
        self.counters.gather_calls += 1;
        Ok(self.tape.value(out).clone())
    }

    /// CSR pass: owned out-edges of local masters whose destination is also
    /// a local master. Mirror destinations are skipped (the CSC pass covers
    /// them).
    fn csr_pass(&mut self, k: usize) {
        let graph = self.ctx.graph;
        for li in 0..self.locals.len() {
            let v = self.locals[li];
            let (dsts, ids) = graph.csr.row(v);
            let edges: Vec<(NodeId, EdgeId)> =
                dsts.iter().copied().zip(ids.iter().copied()).collect();
            for (d, e) in edges {
                if !self.ctx.plan.is_master(self.p, d) {
                    self.counters.csr_mirror_skips += 1;
                    continue;
                }
                if !self.ctx.view.edge_active(e, v, d, k) {
                    continue;
                }
                let dst_li = self.lrow[&d];
                let dst_row = self.frame.n[k].row(dst_li).to_vec();
                match self.gather_message(k, e, v, &dst_row) {
                    Ok(msg) => {
                        if let Some(acc) = self.acc[dst_li].as_mut() {
                            acc.add_slice(msg.data());
                        }
                    }
                    Err(err) => return self.fail(err),
                }
            }
        }
    }

    /// CSC pass: owned in-edges of mirrors hosted here; the mirror has
    /// received its master's value and is gathered passively into a partial.
    fn csc_pass(&mut self, k: usize) {
        let graph = self.ctx.graph;
        let out_dim = self.prog(k).out_dim;
        let det = self.cfg.deterministic;
        let hosted: Vec<NodeId> = self.comm.hosted[self.p]
            .iter()
            .filter(|&&(_, _, u)| u >= k as i16)
            .map(|&(m, _, _)| m)
            .collect();
        for m in hosted {
            let dst_row = self.frame.mirror_n[k]
                .get(&m)
                .expect("mirror value must precede the CSC pass")
                .clone();
            let (srcs, ids) = graph.csc.row(m);
            let edges: Vec<(NodeId, EdgeId)> =
                srcs.iter().copied().zip(ids.iter().copied()).collect();
            for (j, e) in edges {
                if self.ctx.plan.master_of[j as usize] != self.p {
                    continue; // not our edge
                }
                if !self.ctx.view.edge_active(e, j, m, k) {
                    continue;
                }
                match self.gather_message(k, e, j, &dst_row) {
                    Ok(msg) => {
                        self.mirror_acc
                            .entry(m)
                            .or_insert_with(|| RowAcc::new(det, out_dim))
                            .add_slice(msg.data());
                    }
                    Err(err) => return self.fail(err),
                }
            }
        }
    }

    /// Every gather-active mirror ships exactly one forward partial, zero
    /// or not.
    fn send_partials(&mut self, k: usize) {
        let mut by_dest: HashMap<PartitionId, Vec<(NodeId, Payload)>> = HashMap::new();
        let det = self.cfg.deterministic;
        let width = if matches!(self.prog(k).acc, AccKind::AttentionSoftmax) {
            self.prog(k).out_dim + 1 // [Z | S]
        } else {
            self.prog(k).out_dim
        };
        for &(m, master, upto) in &self.comm.hosted[self.p] {
            if upto < k as i16 {
                continue;
            }
            let acc = self
                .mirror_acc
                .remove(&m)
                .unwrap_or_else(|| RowAcc::new(det, width));
            by_dest
                .entry(master)
                .or_default()
                .push((m, acc.to_payload()));
        }
        self.mirror_acc.clear();
        self.send_entries(k, false, Round::Value, true, by_dest);
    }

    fn recv_merge_partials(&mut self, k: usize) {
        let expected = self.comm.expected_partials(self.p, k);
        let got = self.recv_entries(k, false, Round::Value, true, expected);
        for (_, node, payload) in got {
            let li = self.lrow[&node];
            if let Some(acc) = self.acc[li].as_mut() {
                acc.merge_payload(&payload);
            }
        }
    }

    /// Initializes the per-destination accumulators for layer `k`.
    fn init_acc(&mut self, k: usize, width: usize) {
        let det = self.cfg.deterministic;
        self.acc = self
            .locals
            .iter()
            .map(|&v| {
                if self.ctx.view.apply_active(v, k) {
                    Some(RowAcc::new(det, width))
                } else {
                    None
                }
            })
            .collect();
        self.mirror_acc.clear();
    }

    /// Finalizes message accumulators into the frame (mean divides by the
    /// active in-edge count) and runs the apply stage.
    fn finalize_and_apply(&mut self, k: usize) {
        let prog = self.prog(k);
        let acc_kind = prog.acc;
        let out_dim = prog.out_dim;
        let mut msg = Tensor::zeros(self.locals.len(), out_dim);
        for (li, acc) in self.acc.iter().enumerate() {
            let Some(acc) = acc else { continue };
            let mut row = acc.finalize();
            match acc_kind {
                AccKind::Sum => {}
                AccKind::Mean { global_degree } => {
                    let v = self.locals[li];
                    let c = if global_degree {
                        self.ctx.graph.in_degree(v)
                    } else {
                        self.ctx.view.active_in_count(self.ctx.graph, v, k)
                    };
                    if c > 0 {
                        let inv = 1.0 / c as Real;
                        for x in &mut row {
                            *x *= inv;
                        }
                    }
                }
                AccKind::AttentionSoftmax => {
                    // Row layout [Z | S]: message = S / Z.
                    let z = row[0];
                    self.frame.attn_z[k][li] = z;
                    let s = &row[1..];
                    let mut m = vec![0.0; out_dim];
                    if z > 0.0 {
                        for (o, &x) in m.iter_mut().zip(s) {
                            *o = x / z;
                        }
                    }
                    row = m;
                }
            }
            msg.row_mut(li).copy_from_slice(&row);
        }
        if let Err(e) = msg.ensure_finite("accumulate") {
            return self.fail(e);
        }
        self.frame.msg[k] = msg;
        self.acc.clear();

        // Apply on masters only; mirrors refresh at the next layer's sync.
        let mut tape = Tape::new();
        let h_prev = tape.input(self.frame.h[k - 1].clone());
        let n = tape.input(self.frame.n[k].clone());
        let m = tape.input(self.frame.msg[k].clone());
        let diag = {
            let col: Vec<Real> = self
                .locals
                .iter()
                .map(|&v| self.ctx.prop.diag[v as usize])
                .collect();
            tape.input(Tensor::from_vec(self.locals.len(), 1, col))
        };
        let out = self
            .prog(k)
            .apply
            .forward(&mut tape, self.ctx.params, h_prev, n, m, diag);
        if let Err(e) = tape.take_err() {
            return self.fail(e);
        }
        self.frame.h[k] = tape.value(out).clone();
    }

    // -- attention forward ----------------------------------------------------

    fn score_edge(&mut self, k: usize, eid: EdgeId, src: NodeId, dst_row: &[Real]) -> Result<Real> {
        let prog = &self.ctx.programs[k - 1];
        let score_fn = prog.score.as_ref().expect("attention needs a score fn");
        self.tape.clear();
        let n_src = {
            let r = self.lrow[&src];
            self.tape.input_row(self.frame.n[k].row(r))
        };
        let n_dst = self.tape.input_row(dst_row);
        let ef = self.ctx.graph.edge_features.as_ref().map(|f| {
            let row = f.row(eid as usize);
            self.tape.input_row(row)
        });
        let out = score_fn.forward(&mut self.tape, self.ctx.params, n_src, n_dst, ef, 1.0);
        self.tape.take_err()?;
        self.counters.gather_calls += 1;
        Ok(self.tape.value(out).at(0, 0))
    }

    /// Score pass over edges with the given destination locality, folding
    /// per-destination score maxima.
    fn attn_score_pass(&mut self, k: usize, mirrors: bool) {
        let graph = self.ctx.graph;
        let dests: Vec<NodeId> = if mirrors {
            self.comm.hosted[self.p]
                .iter()
                .filter(|&&(_, _, u)| u >= k as i16)
                .map(|&(m, _, _)| m)
                .collect()
        } else {
            self.locals
                .iter()
                .copied()
                .filter(|&v| self.ctx.view.apply_active(v, k))
                .collect()
        };
        for d in dests {
            let dst_row: Vec<Real> = if mirrors {
                self.frame.mirror_n[k][&d].clone()
            } else {
                self.frame.n[k].row(self.lrow[&d]).to_vec()
            };
            let (srcs, ids) = graph.csc.row(d);
            let edges: Vec<(NodeId, EdgeId)> =
                srcs.iter().copied().zip(ids.iter().copied()).collect();
            let mut local_max = Real::NEG_INFINITY;
            let mut any = false;
            for (j, e) in edges {
                if self.ctx.plan.master_of[j as usize] != self.p
                    || !self.ctx.view.edge_active(e, j, d, k)
                {
                    continue;
                }
                match self.score_edge(k, e, j, &dst_row) {
                    Ok(s) => {
                        self.frame.edge_scores.insert((k, e), (s, 0.0));
                        local_max = local_max.max(s);
                        any = true;
                    }
                    Err(err) => return self.fail(err),
                }
            }
            if !any {
                continue;
            }
            if mirrors {
                let slot = self
                    .mirror_max_acc
                    .entry(d)
                    .or_insert(Real::NEG_INFINITY);
                *slot = slot.max(local_max);
            } else {
                let li = self.lrow[&d];
                self.frame.attn_max[k][li] = self.frame.attn_max[k][li].max(local_max);
            }
        }
    }

    fn send_max_partials(&mut self, k: usize) {
        let mut by_dest: HashMap<PartitionId, Vec<(NodeId, Payload)>> = HashMap::new();
        for &(m, master, upto) in &self.comm.hosted[self.p] {
            if upto < k as i16 {
                continue;
            }
            let v = self
                .mirror_max_acc
                .remove(&m)
                .unwrap_or(Real::NEG_INFINITY);
            by_dest
                .entry(master)
                .or_default()
                .push((m, Payload::Dense(vec![v])));
        }
        self.mirror_max_acc.clear();
        self.send_entries(k, false, Round::AttnStat, true, by_dest);
    }

    fn recv_max_and_sync(&mut self, k: usize) {
        let expected = self.comm.expected_partials(self.p, k);
        for (_, node, payload) in self.recv_entries(k, false, Round::AttnStat, true, expected) {
            let Payload::Dense(v) = payload else { unreachable!() };
            let li = self.lrow[&node];
            self.frame.attn_max[k][li] = self.frame.attn_max[k][li].max(v[0]);
        }
        // Broadcast finalized maxima back to mirror hosts.
        let mut by_dest: HashMap<PartitionId, Vec<(NodeId, Payload)>> = HashMap::new();
        for &(m, host, upto) in &self.comm.outbound[self.p] {
            if upto < k as i16 {
                continue;
            }
            let li = self.lrow[&m];
            by_dest
                .entry(host)
                .or_default()
                .push((m, Payload::Dense(vec![self.frame.attn_max[k][li]])));
        }
        self.send_entries(k, false, Round::AttnStat, false, by_dest);
    }

    fn recv_attn_stats(&mut self, k: usize) {
        let expected = self.comm.expected_syncs(self.p, k);
        for (_, node, payload) in self.recv_entries(k, false, Round::AttnStat, false, expected) {
            let Payload::Dense(v) = payload else { unreachable!() };
            self.frame.mirror_max[k].insert(node, v);
        }
    }

    /// Exp-weighted pass: accumulate [Z | S] per destination.
    fn attn_weight_pass(&mut self, k: usize, mirrors: bool) {
        let graph = self.ctx.graph;
        let out_dim = self.prog(k).out_dim;
        let det = self.cfg.deterministic;
        let dests: Vec<NodeId> = if mirrors {
            self.comm.hosted[self.p]
                .iter()
                .filter(|&&(_, _, u)| u >= k as i16)
                .map(|&(m, _, _)| m)
                .collect()
        } else {
            self.locals
                .iter()
                .copied()
                .filter(|&v| self.ctx.view.apply_active(v, k))
                .collect()
        };
        for d in dests {
            let (dst_row, max): (Vec<Real>, Real) = if mirrors {
                (
                    self.frame.mirror_n[k][&d].clone(),
                    self.frame.mirror_max[k][&d][0],
                )
            } else {
                let li = self.lrow[&d];
                (
                    self.frame.n[k].row(li).to_vec(),
                    self.frame.attn_max[k][li],
                )
            };
            let (srcs, ids) = graph.csc.row(d);
            let edges: Vec<(NodeId, EdgeId)> =
                srcs.iter().copied().zip(ids.iter().copied()).collect();
            for (j, e) in edges {
                if self.ctx.plan.master_of[j as usize] != self.p
                    || !self.ctx.view.edge_active(e, j, d, k)
                {
                    continue;
                }
                let s = self.frame.edge_scores[&(k, e)].0;
                let w = (s - max).exp();
                self.frame.edge_scores.insert((k, e), (s, w));
                let message = match self.gather_message(k, e, j, &dst_row) {
                    Ok(m) => m,
                    Err(err) => return self.fail(err),
                };
                let mut zs = Vec::with_capacity(out_dim + 1);
                zs.push(w);
                zs.extend(message.data().iter().map(|&x| x * w));
                if mirrors {
                    self.mirror_acc
                        .entry(d)
                        .or_insert_with(|| RowAcc::new(det, out_dim + 1))
                        .add_slice(&zs);
                } else {
                    let li = self.lrow[&d];
                    if let Some(acc) = self.acc[li].as_mut() {
                        acc.add_slice(&zs);
                    }
                }
            }
        }
    }

    // -- decode ---------------------------------------------------------------

    fn decode(&mut self) {
        let view = self.ctx.view;
        let graph = self.ctx.graph;
        let k = self.ctx.programs.len();
        let targets_local: Vec<NodeId> = view
            .targets
            .iter()
            .copied()
            .filter(|&t| self.ctx.plan.is_master(self.p, t))
            .collect();
        let labeled_local: Vec<(NodeId, u32)> = targets_local
            .iter()
            .filter_map(|&t| graph.labels[t as usize].map(|c| (t, c)))
            .collect();
        let divisor = view
            .targets
            .iter()
            .filter(|&&t| graph.labels[t as usize].is_some())
            .count();
        if divisor == 0 {
            return self.fail(CoreError::Config(
                "no labeled targets in batch".to_string(),
            ));
        }

        if self.cfg.collect_logits || !targets_local.is_empty() {
            // Logits for every local target.
            let rows: Vec<usize> = targets_local.iter().map(|t| self.lrow[t]).collect();
            if !rows.is_empty() {
                let mut tape = Tape::new();
                let h = tape.input(self.frame.h[k].gather_rows(&rows));
                let w = tape.param(self.ctx.params, self.ctx.decoder.w);
                let b = tape.param(self.ctx.params, self.ctx.decoder.b);
                let logits = tape.linear(h, w, Some(b));
                if let Err(e) = tape.take_err() {
                    return self.fail(e);
                }
                let lv = tape.value(logits);
                for (i, &t) in targets_local.iter().enumerate() {
                    let row = lv.row(i);
                    if let Some(label) = graph.labels[t as usize] {
                        let pred = row
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                            .map(|(i, _)| i as u32)
                            .unwrap();
                        self.total += 1;
                        if pred == label {
                            self.hits += 1;
                        }
                    }
                    if self.cfg.collect_logits {
                        self.logits_out.push((t, row.to_vec()));
                    }
                }
            }
        }

        // Loss and its gradient over labeled local targets.
        if !labeled_local.is_empty() {
            let rows: Vec<usize> = labeled_local.iter().map(|(t, _)| self.lrow[t]).collect();
            let labels: Vec<u32> = labeled_local.iter().map(|&(_, c)| c).collect();
            let mut tape = Tape::new();
            let h = tape.input(self.frame.h[k].gather_rows(&rows));
            let w = tape.param(self.ctx.params, self.ctx.decoder.w);
            let b = tape.param(self.ctx.params, self.ctx.decoder.b);
            let logits = tape.linear(h, w, Some(b));
            let loss = tape.softmax_xent_sum(logits, &labels, divisor);
            if let Err(e) = tape.take_err() {
                return self.fail(e);
            }
            if self.cfg.deterministic {
                for &l in tape.row_losses(loss) {
                    self.loss.add(l);
                }
            } else {
                self.loss.add(tape.value(loss).at(0, 0) as f64);
            }
            if self.cfg.backward {
                let mut grads =
                    tape.backward(loss, Tensor::from_vec(1, 1, vec![1.0]), &mut self.sink);
                if let Some(gh) = grads.take(h) {
                    for (i, &row) in rows.iter().enumerate() {
                        self.frame.grad_h[k].row_mut(row).copy_from_slice(gh.row(i));
                    }
                }
            }
        }
    }

    // -- backward -------------------------------------------------------------

    /// Apply backward: from dL/dh^k to upstream message gradients plus the
    /// direct projection and previous-embedding terms.
    fn apply_backward(&mut self, k: usize) {
        let prog_acc = self.prog(k).acc;
        let out_dim = self.prog(k).out_dim;
        let det = self.cfg.deterministic;
        // Pre-size protocol state so sends stay well-formed even if the
        // numeric work below fails.
        self.bwd_local_upstream = vec![Vec::new(); self.locals.len()];
        // n-gradient accumulators live across the whole backward layer.
        self.ngrad = self
            .locals
            .iter()
            .map(|&v| {
                if self.ctx.view.transform_active(v, k) {
                    Some(RowAcc::new(det, out_dim))
                } else {
                    None
                }
            })
            .collect();
        self.ngrad_mirror.clear();

        let mut tape = Tape::new();
        let h_prev = tape.input(self.frame.h[k - 1].clone());
        let n = tape.input(self.frame.n[k].clone());
        let m = tape.input(self.frame.msg[k].clone());
        let diag = {
            let col: Vec<Real> = self
                .locals
                .iter()
                .map(|&v| self.ctx.prop.diag[v as usize])
                .collect();
            tape.input(Tensor::from_vec(self.locals.len(), 1, col))
        };
        let out = self
            .prog(k)
            .apply
            .forward(&mut tape, self.ctx.params, h_prev, n, m, diag);
        if let Err(e) = tape.take_err() {
            return self.fail(e);
        }
        let seed = self.frame.grad_h[k].clone();
        let mut grads = tape.backward(out, seed, &mut self.sink);

        if let Some(gh) = grads.take(h_prev) {
            // Direct apply-to-h_prev path accumulates into dL/dh^{k-1}.
            self.frame.grad_h[k - 1].add_assign(&gh);
        }
        if let Some(gn) = grads.take(n) {
            for (li, acc) in self.ngrad.iter_mut().enumerate() {
                if let Some(acc) = acc.as_mut() {
                    acc.add_slice(gn.row(li));
                }
            }
        }
        let gm = grads
            .take(m)
            .unwrap_or_else(|| Tensor::zeros(self.locals.len(), out_dim));

        // Upstream per-destination gradient the gather edges consume.
        self.bwd_local_upstream = (0..self.locals.len())
            .map(|li| {
                let v = self.locals[li];
                if !self.ctx.view.apply_active(v, k) {
                    return Vec::new();
                }
                let row = gm.row(li);
                match prog_acc {
                    AccKind::Sum => row.to_vec(),
                    AccKind::Mean { global_degree } => {
                        let c = if global_degree {
                            self.ctx.graph.in_degree(v)
                        } else {
                            self.ctx.view.active_in_count(self.ctx.graph, v, k)
                        };
                        if c == 0 {
                            vec![0.0; row.len()]
                        } else {
                            let inv = 1.0 / c as Real;
                            row.iter().map(|&x| x * inv).collect()
                        }
                    }
                    AccKind::AttentionSoftmax => {
                        // Payload [dZ | dS] with dS = gM/Z, dZ = -gM.M/Z.
                        let z = self.frame.attn_z[k][li];
                        if z <= 0.0 {
                            return vec![0.0; row.len() + 1];
                        }
                        let m_row = self.frame.msg[k].row(li);
                        let mut dz = 0.0;
                        let mut payload = Vec::with_capacity(row.len() + 1);
                        payload.push(0.0);
                        for (&g, &mv) in row.iter().zip(m_row) {
                            payload.push(g / z);
                            dz -= g * mv / z;
                        }
                        payload[0] = dz;
                        payload
                    }
                }
            })
            .collect();
    }

    fn send_bwd_sync(&mut self, k: usize) {
        let mut by_dest: HashMap<PartitionId, Vec<(NodeId, Payload)>> = HashMap::new();
        for &(m, host, upto) in &self.comm.outbound[self.p] {
            if upto < k as i16 {
                continue;
            }
            let row = self.bwd_local_upstream[self.lrow[&m]].clone();
            by_dest.entry(host).or_default().push((m, Payload::Dense(row)));
        }
        self.send_entries(k, true, Round::Value, false, by_dest);
    }

    fn recv_bwd_sync(&mut self, k: usize) {
        let expected = self.comm.expected_syncs(self.p, k);
        self.bwd_mirror_upstream.clear();
        for (_, node, payload) in self.recv_entries(k, true, Round::Value, false, expected) {
            let Payload::Dense(row) = payload else { unreachable!() };
            self.bwd_mirror_upstream.insert(node, row);
        }
    }

    /// Backward gather over owned edges with the given destination locality.
    fn edge_backward_pass(&mut self, k: usize, mirrors: bool) {
        let graph = self.ctx.graph;
        let is_attn = matches!(self.prog(k).acc, AccKind::AttentionSoftmax);
        let out_dim = self.prog(k).out_dim;
        let det = self.cfg.deterministic;
        let dests: Vec<NodeId> = if mirrors {
            self.comm.hosted[self.p]
                .iter()
                .filter(|&&(_, _, u)| u >= k as i16)
                .map(|&(m, _, _)| m)
                .collect()
        } else {
            self.locals
                .iter()
                .copied()
                .filter(|&v| self.ctx.view.apply_active(v, k))
                .collect()
        };
        for d in dests {
            let upstream: Vec<Real> = if mirrors {
                self.bwd_mirror_upstream[&d].clone()
            } else {
                self.bwd_local_upstream[self.lrow[&d]].clone()
            };
            if upstream.is_empty() {
                continue;
            }
            let dst_row: Vec<Real> = if mirrors {
                self.frame.mirror_n[k][&d].clone()
            } else {
                self.frame.n[k].row(self.lrow[&d]).to_vec()
            };
            let (srcs, ids) = graph.csc.row(d);
            let edges: Vec<(NodeId, EdgeId)> =
                srcs.iter().copied().zip(ids.iter().copied()).collect();
            for (j, e) in edges {
                if self.ctx.plan.master_of[j as usize] != self.p
                    || !self.ctx.view.edge_active(e, j, d, k)
                {
                    continue;
                }
                if let Err(err) =
                    self.edge_backward(k, e, j, d, &dst_row, &upstream, mirrors, is_attn, out_dim, det)
                {
                    return self.fail(err);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn edge_backward(
        &mut self,
        k: usize,
        e: EdgeId,
        src: NodeId,
        dst: NodeId,
        dst_row: &[Real],
        upstream: &[Real],
        dst_is_mirror: bool,
        is_attn: bool,
        out_dim: usize,
        det: bool,
    ) -> Result<()> {
        let prog = &self.ctx.programs[k - 1];
        // Rebuild the gather tape.
        self.tape.clear();
        let n_src_id = {
            let r = self.lrow[&src];
            self.tape.input_row(self.frame.n[k].row(r))
        };
        let n_dst_id = self.tape.input_row(dst_row);
        let ef = self.ctx.graph.edge_features.as_ref().map(|f| {
            let row = f.row(e as usize);
            self.tape.input_row(row)
        });
        let coeff = self.ctx.prop.per_edge[e as usize];
        let m_out = prog
            .gather
            .forward(&mut self.tape, self.ctx.params, n_src_id, n_dst_id, ef, coeff);
        self.tape.take_err()?;
        self.counters.gather_calls += 1;

        let (gather_seed, score_seed): (Vec<Real>, Option<Real>) = if is_attn {
            let (_, w_e) = self.frame.edge_scores[&(k, e)];
            let dz = upstream[0];
            let ds = &upstream[1..];
            let m_val = self.tape.value(m_out);
            // dL/dw = m . dS + dZ; dL/dm = w dS; dL/ds = w dL/dw.
            let mut dw = dz;
            for (&mv, &dsv) in m_val.data().iter().zip(ds) {
                dw += mv * dsv;
            }
            let gm: Vec<Real> = ds.iter().map(|&x| x * w_e).collect();
            (gm, Some(w_e * dw))
        } else {
            (upstream.to_vec(), None)
        };

        // Backward through the gather.
        let mut grads = self.tape.backward(
            m_out,
            Tensor::row_vec(gather_seed),
            &mut self.sink,
        );
        let mut g_src = grads
            .take(n_src_id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; out_dim]);
        let mut g_dst = grads
            .take(n_dst_id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; out_dim]);

        // Backward through the score function (attention only).
        if let Some(seed) = score_seed {
            let score_fn = prog.score.as_ref().unwrap();
            self.tape.clear();
            let n_src_id = {
                let r = self.lrow[&src];
                self.tape.input_row(self.frame.n[k].row(r))
            };
            let n_dst_id = self.tape.input_row(dst_row);
            let ef = self.ctx.graph.edge_features.as_ref().map(|f| {
                let row = f.row(e as usize);
                self.tape.input_row(row)
            });
            let s_out = score_fn.forward(&mut self.tape, self.ctx.params, n_src_id, n_dst_id, ef, 1.0);
            self.tape.take_err()?;
            let mut sgrads = self.tape.backward(
                s_out,
                Tensor::from_vec(1, 1, vec![seed]),
                &mut self.sink,
            );
            if let Some(gs) = sgrads.take(n_src_id) {
                for (a, &b) in g_src.iter_mut().zip(gs.data()) {
                    *a += b;
                }
            }
            if let Some(gd) = sgrads.take(n_dst_id) {
                for (a, &b) in g_dst.iter_mut().zip(gd.data()) {
                    *a += b;
                }
            }
        }

        // Deliver: source contribution is always local (source-master edge
        // ownership); destination contribution may cross partitions.
        self.counters.gradient_to_source += 1;
        let src_li = self.lrow[&src];
        if let Some(acc) = self.ngrad[src_li].as_mut() {
            acc.add_slice(&g_src);
        }
        self.counters.gradient_to_dest += 1;
        if dst_is_mirror {
            self.ngrad_mirror
                .entry(dst)
                .or_insert_with(|| RowAcc::new(det, out_dim))
                .add_slice(&g_dst);
        } else {
            let li = self.lrow[&dst];
            if let Some(acc) = self.ngrad[li].as_mut() {
                acc.add_slice(&g_dst);
            }
        }
        Ok(())
    }

    fn send_ngrad_partials(&mut self, k: usize) {
        let det = self.cfg.deterministic;
        let out_dim = self.prog(k).out_dim;
        let mut by_dest: HashMap<PartitionId, Vec<(NodeId, Payload)>> = HashMap::new();
        for &(m, master, upto) in &self.comm.hosted[self.p] {
            if upto < k as i16 {
                continue;
            }
            let acc = self
                .ngrad_mirror
                .remove(&m)
                .unwrap_or_else(|| RowAcc::new(det, out_dim));
            by_dest
                .entry(master)
                .or_default()
                .push((m, acc.to_payload()));
        }
        self.ngrad_mirror.clear();
        self.send_entries(k, true, Round::Value, true, by_dest);
    }

    fn recv_ngrad_partials(&mut self, k: usize) {
        let expected = self.comm.expected_partials(self.p, k);
        let got = self.recv_entries(k, true, Round::Value, true, expected);
        for (_, node, payload) in got {
            let li = self.lrow[&node];
            if let Some(acc) = self.ngrad[li].as_mut() {
                acc.merge_payload(&payload);
            }
        }
    }

    /// Projection backward: dL/dn -> dL/dh^{k-1} plus weight gradients.
    fn transform_backward(&mut self, k: usize) {
        let out_dim = self.prog(k).out_dim;
        let mut gn = Tensor::zeros(self.locals.len(), out_dim);
        for (li, acc) in self.ngrad.iter().enumerate() {
            if let Some(acc) = acc.as_ref() {
                gn.row_mut(li).copy_from_slice(&acc.finalize());
            }
        }
        self.ngrad.clear();

        let prog = self.prog(k);
        let keep = prog.dropout_keep;
        let mut tape = Tape::new();
        let x = tape.input(self.frame.h[k - 1].clone());
        let x_in = if self.cfg.dropout_on && keep < 1.0 {
            let dim = self.frame.h[k - 1].cols();
            let mut mask = Vec::with_capacity(self.locals.len() * dim);
            for &v in &self.locals {
                mask.extend(dropout_mask(self.cfg.step_seed, k, v, dim, keep));
            }
            tape.dropout(x, mask)
        } else {
            x
        };
        let n = prog.transform.forward(&mut tape, self.ctx.params, x_in);
        if let Err(e) = tape.take_err() {
            return self.fail(e);
        }
        let mut grads = tape.backward(n, gn, &mut self.sink);
        if let Some(gh) = grads.take(x) {
            self.frame.grad_h[k - 1].add_assign(&gh);
        }
    }

    // -- dispatch ---------------------------------------------------------

    // Phases keep executing after a failure so peers never block on a
    // missing send; the recorded error surfaces when the task completes.
    fn step(&mut self, step: Step) {
        match step {
            Step::Forward(k, ph) => self.forward_phase(k, ph),
            Step::Decode => self.decode(),
            Step::Backward(k, ph) => self.backward_phase(k, ph),
        }
    }

    fn forward_phase(&mut self, k: usize, ph: usize) {
        let acc = self.prog(k).acc;
        let out_dim = self.prog(k).out_dim;
        match (acc, ph) {
            (AccKind::Sum | AccKind::Mean { .. }, 0) => {
                self.init_acc(k, out_dim);
                self.transform_forward(k);
                self.send_value_sync(k);
                self.csr_pass(k);
            }
            (AccKind::Sum | AccKind::Mean { .. }, 1) => {
                self.recv_value_sync(k);
                self.csc_pass(k);
                self.send_partials(k);
            }
            (AccKind::Sum | AccKind::Mean { .. }, 2) => {
                self.recv_merge_partials(k);
                self.finalize_and_apply(k);
            }
            (AccKind::AttentionSoftmax, 0) => {
                self.init_acc(k, out_dim + 1);
                self.frame.attn_max[k] = vec![Real::NEG_INFINITY; self.locals.len()];
                self.frame.attn_z[k] = vec![0.0; self.locals.len()];
                self.transform_forward(k);
                self.send_value_sync(k);
                self.attn_score_pass(k, false);
            }
            (AccKind::AttentionSoftmax, 1) => {
                self.recv_value_sync(k);
                self.attn_score_pass(k, true);
                self.send_max_partials(k);
            }
            (AccKind::AttentionSoftmax, 2) => {
                self.recv_max_and_sync(k);
                self.attn_weight_pass(k, false);
            }
            (AccKind::AttentionSoftmax, 3) => {
                self.recv_attn_stats(k);
                self.attn_weight_pass(k, true);
                self.send_partials(k);
            }
            (AccKind::AttentionSoftmax, 4) => {
                self.recv_merge_partials(k);
                self.finalize_and_apply(k);
            }
            _ => unreachable!("phase {ph} for {acc:?}"),
        }
    }

    fn backward_phase(&mut self, k: usize, ph: usize) {
        match ph {
            0 => {
                self.apply_backward(k);
                self.send_bwd_sync(k);
                self.edge_backward_pass(k, false);
            }
            1 => {
                self.recv_bwd_sync(k);
                self.edge_backward_pass(k, true);
                self.send_ngrad_partials(k);
            }
            2 => {
                self.recv_ngrad_partials(k);
                self.transform_backward(k);
            }
            _ => unreachable!(),
        }
    }

    fn into_result(mut self) -> Result<WorkerResult> {
        if let Some(e) = self.err.take() {
            return Err(e);
        }
        self.counters.frames_released = 1;
        self.counters.param_contributions = 1;
        let input_grads = if self.cfg.collect_input_grads {
            self.locals
                .iter()
                .enumerate()
                .map(|(li, &v)| (v, self.frame.grad_h[0].row(li).to_vec()))
                .collect()
        } else {
            Vec::new()
        };
        Ok(WorkerResult {
            sink: self.sink,
            loss: self.loss,
            counters: self.counters,
            hits: self.hits,
            total: self.total,
            logits: self.logits_out,
            input_grads,
        })
    }
}

// ---------------------------------------------------------------------------
// Drivers
// ---------------------------------------------------------------------------

/// Executes one task (forward, decode, optional backward and reduce) over
/// all partitions.
pub fn run_task(ctx: &TaskContext, cfg: &EngineConfig) -> Result<TaskOutcome> {
    let parts = ctx.plan.partition_count;
    let comm = CommPlan::build(ctx.graph, ctx.view, ctx.plan);
    let script = build_script(ctx.programs, cfg.backward);
    let mut transport = Transport::new(parts);

    let mut workers: Vec<Worker> = (0..parts)
        .map(|p| {
            let senders = transport.senders[p].clone();
            let rx = transport.receivers[p].take().unwrap();
            Worker::new(p, ctx, cfg, &comm, senders, rx)
        })
        .collect();

    let results: Vec<WorkerResult> = if cfg.threaded && parts > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = workers
                .drain(..)
                .map(|mut w| {
                    let script = &script;
                    scope.spawn(move || {
                        for &s in script {
                            w.step(s);
                        }
                        w.into_result()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        for &s in &script {
            for w in workers.iter_mut() {
                w.step(s);
            }
        }
        workers
            .drain(..)
            .map(|w| w.into_result())
            .collect::<Result<Vec<_>>>()?
    };

    // Reduce: deterministic merge in ascending partition order.
    let mut counters = Counters::with_layers(ctx.programs.len());
    let mut loss = LossAcc::new(cfg.deterministic);
    let mut sink: Option<GradSink> = None;
    let mut hits = 0;
    let mut total = 0;
    let mut logits = Vec::new();
    let mut input_rows: Vec<(NodeId, Vec<Real>)> = Vec::new();
    for r in results {
        counters.merge(&r.counters);
        loss.merge(&r.loss);
        hits += r.hits;
        total += r.total;
        logits.extend(r.logits);
        input_rows.extend(r.input_grads);
        match sink.as_mut() {
            None => sink = Some(r.sink),
            Some(s) => s.merge(&r.sink),
        }
    }
    logits.sort_by_key(|&(v, _)| v);

    let input_grads = if cfg.collect_input_grads {
        let d0 = ctx.programs.first().map_or(0, |p| p.in_dim);
        let mut t = Tensor::zeros(ctx.graph.num_nodes, d0);
        for (v, row) in input_rows {
            t.row_mut(v as usize).copy_from_slice(&row);
        }
        Some(t)
    } else {
        None
    };

    let loss = loss.value();
    if !loss.is_finite() {
        return Err(CoreError::NonFinite { op: "loss".into() });
    }
    Ok(TaskOutcome {
        loss,
        grads: if cfg.backward {
            sink.map(|s| s.into_grads())
        } else {
            None
        },
        counters,
        train_hits: hits,
        train_total: total,
        logits,
        input_grads,
    })
}
