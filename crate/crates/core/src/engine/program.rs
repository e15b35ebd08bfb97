//! Layer programs: the staged per-node / per-edge functions a layer executes.
//!
//! A program supplies a per-node projection (transform), a per-edge
//! propagation (gather), an accumulation kind, and a per-node apply. All
//! functions are built on [`Tape`] so the backward pass is derived by
//! replaying the recorded ops in reverse.

use std::sync::Arc;

use crate::nn::{Activation, ParamId, ParameterSet, Tape, ValId};
use crate::tensor::Real;

/// Per-node projection; `h_prev` may be a whole row batch.
pub trait NodeTransform: Send + Sync {
    fn forward(&self, tape: &mut Tape, params: &ParameterSet, h_prev: ValId) -> ValId;
}

/// Per-edge propagation. `coeff` is the structural coefficient of the edge
/// under the layer's normalization (1.0 when unused).
pub trait EdgeGather: Send + Sync {
    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        n_src: ValId,
        n_dst: ValId,
        edge_feat: Option<ValId>,
        coeff: Real,
    ) -> ValId;
}

/// Per-node apply; row batches. `self_coeff` is a column of per-node
/// diagonal terms (the normalization's self contribution).
pub trait NodeApply: Send + Sync {
    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        h_prev: ValId,
        n: ValId,
        msg: ValId,
        self_coeff: ValId,
    ) -> ValId;
}

/// Message accumulation semantics of the Sum stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccKind {
    Sum,
    /// Divide by the number of active in-edges (view-local denominator) or
    /// by global in-degree when `global_degree` is set.
    Mean { global_degree: bool },
    /// Softmax over incoming active edges, computed in two gather passes
    /// (score/max pass, then exp-weighted pass).
    AttentionSoftmax,
}

/// One encoding layer as a staged program.
#[derive(Clone)]
pub struct LayerProgram {
    pub transform: Arc<dyn NodeTransform>,
    pub gather: Arc<dyn EdgeGather>,
    /// Unnormalized attention score function (1x1 output); present iff
    /// `acc == AttentionSoftmax`.
    pub score: Option<Arc<dyn EdgeGather>>,
    pub acc: AccKind,
    pub apply: Arc<dyn NodeApply>,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Keep probability for transform-input dropout (1.0 = off).
    pub dropout_keep: Real,
}

impl std::fmt::Debug for LayerProgram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LayerProgram")
            .field("acc", &self.acc)
            .field("in_dim", &self.in_dim)
            .field("out_dim", &self.out_dim)
            .finish()
    }
}

/// Linear decoder feeding softmax cross-entropy over batch targets.
#[derive(Debug, Clone, Copy)]
pub struct Decoder {
    pub w: ParamId,
    pub b: ParamId,
    pub class_count: usize,
}

// ---------------------------------------------------------------------------
// Stock stage implementations
// ---------------------------------------------------------------------------

/// Projection `n = h W (+ b)`.
pub struct LinearTransform {
    pub w: ParamId,
    pub bias: Option<ParamId>,
}

impl NodeTransform for LinearTransform {
    fn forward(&self, tape: &mut Tape, params: &ParameterSet, h_prev: ValId) -> ValId {
        let w = tape.param(params, self.w);
        let bias = self.bias.map(|b| tape.param(params, b));
        tape.linear(h_prev, w, bias)
    }
}

/// Identity projection (test programs).
pub struct IdentityTransform;

impl NodeTransform for IdentityTransform {
    fn forward(&self, tape: &mut Tape, _params: &ParameterSet, h_prev: ValId) -> ValId {
        tape.scale(h_prev, 1.0)
    }
}

/// Propagation `m = coeff * n_src`.
pub struct ScaleSourceGather;

impl EdgeGather for ScaleSourceGather {
    fn forward(
        &self,
        tape: &mut Tape,
        _params: &ParameterSet,
        n_src: ValId,
        _n_dst: ValId,
        _edge_feat: Option<ValId>,
        coeff: Real,
    ) -> ValId {
        tape.scale(n_src, coeff)
    }
}

/// Apply `h = act(self_coeff * n + M)`: the diagonal term of the
/// normalization plus the accumulated messages.
pub struct DiagPlusMsgApply {
    pub activation: Activation,
}

impl NodeApply for DiagPlusMsgApply {
    fn forward(
        &self,
        tape: &mut Tape,
        _params: &ParameterSet,
        _h_prev: ValId,
        n: ValId,
        msg: ValId,
        self_coeff: ValId,
    ) -> ValId {
        let diag = tape.mul_col(n, self_coeff);
        let z = tape.add(diag, msg);
        apply_activation(tape, z, self.activation)
    }
}

/// Apply `h = act(M)` (attention layers).
pub struct MsgOnlyApply {
    pub activation: Activation,
}

impl NodeApply for MsgOnlyApply {
    fn forward(
        &self,
        tape: &mut Tape,
        _params: &ParameterSet,
        _h_prev: ValId,
        _n: ValId,
        msg: ValId,
        _self_coeff: ValId,
    ) -> ValId {
        apply_activation(tape, msg, self.activation)
    }
}

/// Apply `h = M` (test programs: replace with the accumulated message).
pub struct ReplaceApply;

impl NodeApply for ReplaceApply {
    fn forward(
        &self,
        tape: &mut Tape,
        _params: &ParameterSet,
        _h_prev: ValId,
        _n: ValId,
        msg: ValId,
        _self_coeff: ValId,
    ) -> ValId {
        tape.scale(msg, 1.0)
    }
}

/// Edge-featured attention score:
/// `leaky_relu(a^T [n_dst | n_src | edge_feat W_e])`.
pub struct EdgeAttentionScore {
    pub a: ParamId,
    pub w_edge: Option<ParamId>,
    pub slope: Real,
}

impl EdgeGather for EdgeAttentionScore {
    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        n_src: ValId,
        n_dst: ValId,
        edge_feat: Option<ValId>,
        _coeff: Real,
    ) -> ValId {
        let mut cat = tape.concat(n_dst, n_src);
        if let Some(w_edge) = self.w_edge {
            let ef = edge_feat.expect("edge features required by the attention score");
            let w = tape.param(params, w_edge);
            let proj = tape.matmul(ef, w);
            cat = tape.concat(cat, proj);
        }
        let a = tape.param(params, self.a);
        let s = tape.matmul(cat, a);
        tape.leaky_relu(s, self.slope)
    }
}

pub fn apply_activation(tape: &mut Tape, x: ValId, act: Activation) -> ValId {
    match act {
        Activation::Identity => tape.scale(x, 1.0),
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
    }
}

/// Test program: copy-source gather, sum accumulation, replace apply. The
/// center of a star receives exactly the sum of its in-neighbors' features.
pub fn identity_program(dim: usize) -> LayerProgram {
    LayerProgram {
        transform: Arc::new(IdentityTransform),
        gather: Arc::new(ScaleSourceGather),
        score: None,
        acc: AccKind::Sum,
        apply: Arc::new(ReplaceApply),
        in_dim: dim,
        out_dim: dim,
        dropout_keep: 1.0,
    }
}
