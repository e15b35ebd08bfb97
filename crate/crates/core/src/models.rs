//! Concrete model definitions: GCN and edge-featured attention layer stacks
//! plus the linear decoder and loss.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::engine::program::{
    AccKind, Decoder, DiagPlusMsgApply, EdgeAttentionScore, LayerProgram, LinearTransform,
    MsgOnlyApply,
};
use crate::error::{CoreError, Result};
use crate::graph::NormMode;
use crate::nn::{Activation, ParamId, ParameterSet, Tape};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Gcn,
    GatEdge,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Gcn => "gcn",
            LayerKind::GatEdge => "gat_edge",
        }
    }
}

impl std::str::FromStr for LayerKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(LayerKind::Gcn),
            "gat_edge" => Ok(LayerKind::GatEdge),
            other => Err(CoreError::Config(format!("unknown layer kind {other}"))),
        }
    }
}

/// Full model description; every field participates in the checkpoint hash.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub kind: LayerKind,
    /// `[d_in, h_1, .., d_K]`.
    pub layer_dims: Vec<usize>,
    /// One activation per encoding layer.
    pub activations: Vec<Activation>,
    pub acc: AccKind,
    pub bias: bool,
    pub dropout_keep: Real,
    /// L2 coefficient on the first layer's weight matrix.
    pub l2: Real,
    pub class_count: usize,
    pub edge_dim: usize,
    /// Width of the projected edge features inside the attention score.
    pub edge_proj_dim: usize,
    pub normalization: NormMode,
    pub attention_slope: Real,
}

impl ModelSpec {
    /// Conventional GCN stack: hidden layers use `activation`, the last
    /// encoding layer is linear.
    pub fn gcn(layer_dims: Vec<usize>, activation: Activation, class_count: usize) -> Self {
        let k = layer_dims.len() - 1;
        let mut activations = vec![activation; k];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        Self {
            kind: LayerKind::Gcn,
            layer_dims,
            activations,
            acc: AccKind::Sum,
            bias: false,
            dropout_keep: 1.0,
            l2: 0.0,
            class_count,
            edge_dim: 0,
            edge_proj_dim: 0,
            normalization: NormMode::Renormalized,
            attention_slope: 0.2,
        }
    }

    pub fn gat_edge(
        layer_dims: Vec<usize>,
        activation: Activation,
        class_count: usize,
        edge_dim: usize,
        edge_proj_dim: usize,
    ) -> Self {
        let k = layer_dims.len() - 1;
        let mut activations = vec![activation; k];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        Self {
            kind: LayerKind::GatEdge,
            layer_dims,
            activations,
            acc: AccKind::AttentionSoftmax,
            bias: false,
            dropout_keep: 1.0,
            l2: 0.0,
            class_count,
            edge_dim,
            edge_proj_dim,
            normalization: NormMode::Renormalized,
            attention_slope: 0.2,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(CoreError::Config("model needs at least one layer".into()));
        }
        if self.activations.len() != self.layer_count() {
            return Err(CoreError::Config("one activation per layer".into()));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(CoreError::Config("dropout keep-prob must be in (0,1]".into()));
        }
        if self.class_count == 0 {
            return Err(CoreError::Config("class count must be positive".into()));
        }
        if matches!(self.kind, LayerKind::GatEdge)
            && self.edge_dim > 0
            && self.edge_proj_dim == 0
        {
            return Err(CoreError::Config(
                "edge_proj_dim required when edge features are used".into(),
            ));
        }
        Ok(())
    }

    /// Stable textual form used for the checkpoint compatibility hash.
    pub fn canonical_string(&self) -> String {
        let dims: Vec<String> = self.layer_dims.iter().map(|d| d.to_string()).collect();
        let acts: Vec<&str> = self.activations.iter().map(|a| a.as_str()).collect();
        let acc = match self.acc {
            AccKind::Sum => "sum".to_string(),
            AccKind::Mean { global_degree } => {
                if global_degree {
                    "mean_global".to_string()
                } else {
                    "mean".to_string()
                }
            }
            AccKind::AttentionSoftmax => "attention".to_string(),
        };
        format!(
            "kind={};dims={};acts={};acc={};bias={};dropout={};l2={};classes={};edge_dim={};edge_proj={};norm={};slope={}",
            self.kind.as_str(),
            dims.join(","),
            acts.join(","),
            acc,
            self.bias,
            self.dropout_keep,
            self.l2,
            self.class_count,
            self.edge_dim,
            self.edge_proj_dim,
            self.normalization.as_str(),
            self.attention_slope,
        )
    }

    pub fn spec_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_string().as_bytes());
        hex_string(&hasher.finalize())
    }

    /// Builds the seeded parameter set and the per-layer programs.
    pub fn init(&self, seed: u64) -> Result<ModelArtifacts> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let mut programs = Vec::with_capacity(self.layer_count());
        let mut regularized = Vec::new();

        for k in 0..self.layer_count() {
            let (din, dout) = (self.layer_dims[k], self.layer_dims[k + 1]);
            let w = params.push(format!("layer{k}.weight"), glorot(&mut rng, din, dout));
            if k == 0 && self.l2 > 0.0 {
                regularized.push(w);
            }
            let bias = self
                .bias
                .then(|| params.push(format!("layer{k}.bias"), Tensor::zeros(1, dout)));
            let program = match self.kind {
                LayerKind::Gcn => gcn_program(
                    din,
                    dout,
                    w,
                    bias,
                    self.activations[k],
                    self.acc,
                    self.dropout_keep,
                ),
                LayerKind::GatEdge => {
                    let w_edge = (self.edge_dim > 0).then(|| {
                        params.push(
                            format!("layer{k}.edge_proj"),
                            glorot(&mut rng, self.edge_dim, self.edge_proj_dim),
                        )
                    });
                    let score_dim =
                        2 * dout + if self.edge_dim > 0 { self.edge_proj_dim } else { 0 };
                    let a = params.push(format!("layer{k}.attention"), glorot(&mut rng, score_dim, 1));
                    gat_edge_program(
                        din,
                        dout,
                        w,
                        bias,
                        a,
                        w_edge,
                        self.activations[k],
                        self.attention_slope,
                        self.dropout_keep,
                    )
                }
            };
            programs.push(program);
        }

        let d_k = *self.layer_dims.last().unwrap();
        let dec_w = params.push("decoder.weight", glorot(&mut rng, d_k, self.class_count));
        let dec_b = params.push("decoder.bias", Tensor::zeros(1, self.class_count));
        Ok(ModelArtifacts {
            params,
            programs,
            decoder: Decoder {
                w: dec_w,
                b: dec_b,
                class_count: self.class_count,
            },
            regularized,
        })
    }
}

/// Instantiated model: parameters plus executable layer programs.
pub struct ModelArtifacts {
    pub params: ParameterSet,
    pub programs: Vec<LayerProgram>,
    pub decoder: Decoder,
    /// Parameters subject to the L2 penalty.
    pub regularized: Vec<ParamId>,
}

/// Graph-convolution layer: project, propagate by structural coefficient,
/// sum, then apply the diagonal term and the activation.
#[allow(clippy::too_many_arguments)]
pub fn gcn_program(
    in_dim: usize,
    out_dim: usize,
    w: ParamId,
    bias: Option<ParamId>,
    activation: Activation,
    acc: AccKind,
    dropout_keep: Real,
) -> LayerProgram {
    LayerProgram {
        transform: Arc::new(LinearTransform { w, bias }),
        gather: Arc::new(crate::engine::program::ScaleSourceGather),
        score: None,
        acc,
        apply: Arc::new(DiagPlusMsgApply { activation }),
        in_dim,
        out_dim,
        dropout_keep,
    }
}

/// Edge-featured attention layer: messages are source projections, weighted
/// by a softmax over `leaky_relu(a^T [n_dst | n_src | e W_e])` scores.
#[allow(clippy::too_many_arguments)]
pub fn gat_edge_program(
    in_dim: usize,
    out_dim: usize,
    w: ParamId,
    bias: Option<ParamId>,
    a: ParamId,
    w_edge: Option<ParamId>,
    activation: Activation,
    slope: Real,
    dropout_keep: Real,
) -> LayerProgram {
    LayerProgram {
        transform: Arc::new(LinearTransform { w, bias }),
        gather: Arc::new(crate::engine::program::ScaleSourceGather),
        score: Some(Arc::new(EdgeAttentionScore {
            a,
            w_edge,
            slope,
        })),
        acc: AccKind::AttentionSoftmax,
        apply: Arc::new(MsgOnlyApply { activation }),
        in_dim,
        out_dim,
        dropout_keep,
    }
}

/// Standalone decoder + loss evaluation over embedding rows (one row per
/// labeled target). Returns the mean loss and the logits.
pub fn decode_and_loss(
    h: &Tensor,
    labels: &[u32],
    params: &ParameterSet,
    decoder: Decoder,
) -> Result<(f64, Tensor)> {
    if labels.is_empty() {
        return Err(CoreError::Config("no labeled targets in batch".into()));
    }
    let mut tape = Tape::new();
    let hid = tape.input(h.clone());
    let w = tape.param(params, decoder.w);
    let b = tape.param(params, decoder.b);
    let logits = tape.linear(hid, w, Some(b));
    let loss = tape.softmax_xent_sum(logits, labels, labels.len());
    tape.take_err()?;
    Ok((
        tape.value(loss).at(0, 0) as f64,
        tape.value(logits).clone(),
    ))
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as Real;
    Tensor::from_vec(
        fan_in,
        fan_out,
        (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect(),
    )
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
