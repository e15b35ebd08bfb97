//! Multi-versioned parameter management and optimizers.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use crate::nn::ParameterSet;
use crate::tensor::{Real, Tensor};

/// An immutable published snapshot of all trainable tensors.
#[derive(Debug, Clone)]
pub struct ParameterVersion {
    pub version: u64,
    pub params: Arc<ParameterSet>,
}

#[derive(Debug, Clone, Copy)]
pub enum OptimizerKind {
    Sgd {
        lr: Real,
    },
    Adam {
        lr: Real,
        beta1: Real,
        beta2: Real,
        eps: Real,
    },
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd { .. } => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

#[derive(Debug)]
struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

#[derive(Debug)]
struct Inner {
    latest: ParameterVersion,
    /// Recent snapshots kept for version lookup; concurrent readers hold
    /// their own `Arc`, so eviction never invalidates an in-flight step.
    history: VecDeque<ParameterVersion>,
    adam: Option<AdamState>,
    kind: OptimizerKind,
    /// Completed updates, for staleness accounting in async mode.
    update_count: u64,
}

/// Single writer of parameter versions; readers fetch snapshots without
/// blocking the writer. Optimizer state is global and guarded by the update
/// path.
#[derive(Debug)]
pub struct ParameterManager {
    inner: Mutex<Inner>,
    history_cap: usize,
}

impl ParameterManager {
    pub fn new(initial: ParameterSet, kind: OptimizerKind) -> Self {
        let adam = match kind {
            OptimizerKind::Adam { .. } => Some(AdamState {
                m: initial
                    .iter()
                    .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                    .collect(),
                v: initial
                    .iter()
                    .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                    .collect(),
                t: 0,
            }),
            OptimizerKind::Sgd { .. } => None,
        };
        let latest = ParameterVersion {
            version: 0,
            params: Arc::new(initial),
        };
        let mut history = VecDeque::new();
        history.push_back(latest.clone());
        Self {
            inner: Mutex::new(Inner {
                latest,
                history,
                adam,
                kind,
                update_count: 0,
            }),
            history_cap: 8,
        }
    }

    pub fn latest(&self) -> ParameterVersion {
        self.inner.lock().unwrap().latest.clone()
    }

    /// Exact snapshot lookup among retained versions.
    pub fn fetch(&self, version: u64) -> Option<ParameterVersion> {
        let inner = self.inner.lock().unwrap();
        inner
            .history
            .iter()
            .find(|v| v.version == version)
            .cloned()
    }

    /// Applies the optimizer to the latest version and publishes the result
    /// as `version + 1`. Returns the new version number and the staleness of
    /// the gradient (updates that landed since `base_version`).
    pub fn update(&self, grads: &[Tensor], base_version: u64) -> (u64, u64) {
        let mut inner = self.inner.lock().unwrap();
        let staleness = inner.latest.version.saturating_sub(base_version);
        let mut params: ParameterSet = (*inner.latest.params).clone();
        let kind = inner.kind;
        match kind {
            OptimizerKind::Sgd { lr } => {
                for (id, g) in grads.iter().enumerate() {
                    let value = params.value_mut(id);
                    for (w, &gv) in value.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let adam = inner.adam.as_mut().expect("adam state");
                adam.t += 1;
                let t = adam.t as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (id, g) in grads.iter().enumerate() {
                    let m = &mut adam.m[id];
                    let v = &mut adam.v[id];
                    for ((mv, vv), &gv) in
                        m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                    }
                    let value = params.value_mut(id);
                    for ((w, &mv), &vv) in value
                        .data_mut()
                        .iter_mut()
                        .zip(m.data())
                        .zip(v.data())
                    {
                        let m_hat = mv / bc1;
                        let v_hat = vv / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        let next = ParameterVersion {
            version: inner.latest.version + 1,
            params: Arc::new(params),
        };
        inner.latest = next.clone();
        inner.history.push_back(next);
        if inner.history.len() > self.history_cap {
            inner.history.pop_front();
        }
        inner.update_count += 1;
        (inner.latest.version, staleness)
    }
}
