//! In-memory transport between partition workers and traffic instrumentation.
//!
//! Channels are reliable and FIFO per sender-receiver pair. The same worker
//! code runs whether partitions execute on separate threads or take turns in
//! one thread: sends never block (unbounded queues) and each receive phase
//! knows exactly how many entries to expect.

use std::sync::mpsc::{channel, Receiver, Sender};

use crate::exact::ExactVec;
use crate::graph::NodeId;
use crate::partition::PartitionId;
use crate::tensor::Real;

/// Message payload: plain values, or exact accumulator state in
/// deterministic mode.
#[derive(Debug, Clone)]
pub enum Payload {
    Dense(Vec<Real>),
    Exact(ExactVec),
}

impl Payload {
    pub fn f64_words(&self) -> usize {
        match self {
            Payload::Dense(v) => v.len(),
            // 68 bins plus a counter word per component.
            Payload::Exact(e) => e.len() * 69,
        }
    }
}

/// Communication phases within one layer execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Round {
    /// Master values to mirrors (forward) or message-gradients to mirrors
    /// (backward).
    Value,
    /// Attention max/normalizer sync (second value round of a layer).
    AttnStat,
}

/// One envelope between two partitions, carrying per-node logical messages.
#[derive(Debug)]
pub struct Envelope {
    pub from: PartitionId,
    pub layer: usize,
    pub backward: bool,
    pub round: Round,
    /// True for mirror-to-master partial accumulations, false for
    /// master-to-mirror value distribution.
    pub partial: bool,
    pub entries: Vec<(NodeId, Payload)>,
}

/// All-to-all mailboxes for one task execution.
pub struct Transport {
    pub senders: Vec<Vec<Sender<Envelope>>>,
    pub receivers: Vec<Option<Receiver<Envelope>>>,
}

impl Transport {
    pub fn new(partitions: usize) -> Self {
        let mut to: Vec<Sender<Envelope>> = Vec::with_capacity(partitions);
        let mut receivers = Vec::with_capacity(partitions);
        for _ in 0..partitions {
            let (tx, rx) = channel();
            to.push(tx);
            receivers.push(Some(rx));
        }
        let senders = (0..partitions).map(|_| to.clone()).collect();
        Self { senders, receivers }
    }
}

/// Logical traffic and work counters, merged across workers per step.
#[derive(Debug, Clone, Default)]
pub struct Counters {
    /// Master-to-mirror value messages, indexed by layer (1-based layers;
    /// index 0 unused), forward direction.
    pub master_mirror_fwd: Vec<u64>,
    /// Same, backward direction.
    pub master_mirror_bwd: Vec<u64>,
    /// Mirror-to-master partial-accumulation messages.
    pub mirror_partials: u64,
    /// Per-edge gradient handoffs to source nodes (local deliveries).
    pub gradient_to_source: u64,
    /// Per-edge gradient contributions bound for destination masters.
    pub gradient_to_dest: u64,
    /// Parameter-gradient contributions entering the reduce.
    pub param_contributions: u64,
    /// Payload volume in bytes (8 x f64 words).
    pub bytes: u64,
    /// Gather function invocations (forward + backward).
    pub gather_calls: u64,
    /// Edges skipped by the CSR pass because the destination is a mirror.
    pub csr_mirror_skips: u64,
    /// Gather invocations whose destination was a mirror during the CSR
    /// pass; the traversal contract keeps this at zero.
    pub csr_mirror_gathers: u64,
    /// Task frames allocated / released.
    pub frames_allocated: u64,
    pub frames_released: u64,
}

impl Counters {
    pub fn with_layers(layers: usize) -> Self {
        Self {
            master_mirror_fwd: vec![0; layers + 1],
            master_mirror_bwd: vec![0; layers + 1],
            ..Default::default()
        }
    }

    pub fn merge(&mut self, other: &Counters) {
        if self.master_mirror_fwd.len() < other.master_mirror_fwd.len() {
            self.master_mirror_fwd.resize(other.master_mirror_fwd.len(), 0);
            self.master_mirror_bwd.resize(other.master_mirror_bwd.len(), 0);
        }
        for (a, b) in self.master_mirror_fwd.iter_mut().zip(&other.master_mirror_fwd) {
            *a += b;
        }
        for (a, b) in self.master_mirror_bwd.iter_mut().zip(&other.master_mirror_bwd) {
            *a += b;
        }
        self.mirror_partials += other.mirror_partials;
        self.gradient_to_source += other.gradient_to_source;
        self.gradient_to_dest += other.gradient_to_dest;
        self.param_contributions += other.param_contributions;
        self.bytes += other.bytes;
        self.gather_calls += other.gather_calls;
        self.csr_mirror_skips += other.csr_mirror_skips;
        self.csr_mirror_gathers += other.csr_mirror_gathers;
        self.frames_allocated += other.frames_allocated;
        self.frames_released += other.frames_released;
    }

    pub fn total_messages(&self) -> u64 {
        self.master_mirror_fwd.iter().sum::<u64>()
            + self.master_mirror_bwd.iter().sum::<u64>()
            + self.mirror_partials
            + self.param_contributions
    }
}
