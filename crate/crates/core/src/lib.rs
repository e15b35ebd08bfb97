// `Real as f64` casts look redundant in the default build but are
// load-bearing when the single-precision feature narrows `Real` to f32.
#![allow(clippy::unnecessary_cast)]

//! Distributed GNN training over master/mirror-partitioned graphs.
//!
//! The crate executes GNN layers as staged message-passing programs
//! (per-node transform, per-edge gather, per-node accumulate and apply, and
//! a global parameter reduce) across partition workers that communicate only
//! along master-mirror pairs. A dense spectral reference implementation and
//! finite-difference gradient checks back every numeric path.

pub mod cluster;
pub mod engine;
pub mod error;
pub mod exact;
pub mod graph;
pub mod models;
pub mod nn;
pub mod oracle;
pub mod partition;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod view;

pub use cluster::{cluster_louvain, load_clusters, modularity, ClusterAssignment};
pub use error::{CoreError, Result};
pub use exact::{ExactAcc, ExactVec};
pub use graph::{AdjIndex, DatasetBundle, EdgeId, Graph, IngestOptions, NodeId, NormMode, PropWeights};
pub use nn::{Activation, GradSink, ParamId, ParamTensor, ParameterSet, Tape, ValId};
pub use partition::{partition_even, replica_factor, PartitionId, PartitionOptions, PartitionPlan};
pub use tensor::{Real, Tensor};
