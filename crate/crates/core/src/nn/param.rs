//! Trainable parameters and gradient accumulation.

use crate::exact::ExactVec;
use crate::tensor::{Real, Tensor};

/// Index of a parameter within a [`ParameterSet`].
pub type ParamId = usize;

/// A trainable tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// All trainable tensors of a model, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: Vec<ParamTensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(ParamTensor::new(name, value));
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Sum of squared entries of the given parameters (L2 regularizer term).
    pub fn sq_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .map(|&id| {
                self.params[id]
                    .value
                    .data()
                    .iter()
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
            })
            .sum()
    }
}

/// One parameter's gradient storage inside a [`GradSink`].
#[derive(Debug, Clone)]
enum GradStore {
    Fast(Tensor),
    Exact(ExactVec),
}

/// Accumulates parameter-gradient contributions during backward passes.
///
/// In deterministic mode every contribution enters an order-independent
/// exact accumulator, so the reduced gradient is bit-identical no matter how
/// contributions were grouped across partitions. In fast mode contributions
/// are added in the caller's (fixed per-partition) order.
#[derive(Debug, Clone)]
pub struct GradSink {
    stores: Vec<GradStore>,
    shapes: Vec<[usize; 2]>,
    deterministic: bool,
}

impl GradSink {
    pub fn new(params: &ParameterSet, deterministic: bool) -> Self {
        let shapes: Vec<[usize; 2]> = params.iter().map(|p| p.value.shape()).collect();
        let stores = shapes
            .iter()
            .map(|s| {
                if deterministic {
                    GradStore::Exact(ExactVec::zeros(s[0] * s[1]))
                } else {
                    GradStore::Fast(Tensor::zeros(s[0], s[1]))
                }
            })
            .collect();
        Self {
            stores,
            shapes,
            deterministic,
        }
    }

    pub fn deterministic(&self) -> bool {
        self.deterministic
    }

    /// Adds a whole gradient tensor for one parameter.
    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        debug_assert_eq!(self.shapes[id], grad.shape(), "grad shape for param {id}");
        match &mut self.stores[id] {
            GradStore::Fast(t) => t.add_assign(grad),
            GradStore::Exact(e) => {
                for (acc, &g) in e.accs.iter_mut().zip(grad.data()) {
                    acc.add(g as f64);
                }
            }
        }
    }

    /// Adds `x^T g` for a batch of rows. In deterministic mode each row's
    /// outer product enters the exact accumulator separately, which keeps the
    /// result independent of how rows were distributed over partitions.
    pub fn accumulate_outer(&mut self, id: ParamId, x: &Tensor, g: &Tensor) {
        debug_assert_eq!(x.rows(), g.rows());
        debug_assert_eq!(self.shapes[id], [x.cols(), g.cols()]);
        match &mut self.stores[id] {
            GradStore::Fast(t) => t.add_assign(&x.t_matmul(g)),
            GradStore::Exact(e) => {
                let (a, b) = (x.cols(), g.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let gr = g.row(r);
                    for (i, &xi) in xr.iter().enumerate().take(a) {
                        if xi == 0.0 {
                            continue;
                        }
                        for (j, &gj) in gr.iter().enumerate().take(b) {
                            e.accs[i * b + j].add(xi as f64 * gj as f64);
                        }
                    }
                }
            }
        }
    }

    /// Adds the column sums of `g` (bias gradient), row by row when exact.
    pub fn accumulate_row_sums(&mut self, id: ParamId, g: &Tensor) {
        debug_assert_eq!(self.shapes[id], [1, g.cols()]);
        match &mut self.stores[id] {
            GradStore::Fast(t) => {
                for r in 0..g.rows() {
                    for (o, &v) in t.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            GradStore::Exact(e) => {
                for r in 0..g.rows() {
                    for (acc, &v) in e.accs.iter_mut().zip(g.row(r)) {
                        acc.add(v as f64);
                    }
                }
            }
        }
    }

    /// Merges another sink (e.g. a partition's contribution) into this one.
    pub fn merge(&mut self, other: &GradSink) {
        assert_eq!(self.deterministic, other.deterministic);
        for (s, o) in self.stores.iter_mut().zip(&other.stores) {
            match (s, o) {
                (GradStore::Fast(a), GradStore::Fast(b)) => a.add_assign(b),
                (GradStore::Exact(a), GradStore::Exact(b)) => a.merge(b),
                _ => unreachable!("mixed sink modes"),
            }
        }
    }

    /// Rounds/extracts the reduced gradients, aligned with the parameter set.
    pub fn into_grads(self) -> Vec<Tensor> {
        self.stores
            .into_iter()
            .zip(self.shapes)
            .map(|(s, shape)| match s {
                GradStore::Fast(t) => t,
                GradStore::Exact(e) => {
                    let mut t = Tensor::zeros(shape[0], shape[1]);
                    for (o, acc) in t.data_mut().iter_mut().zip(&e.accs) {
                        *o = acc.round() as Real;
                    }
                    t
                }
            })
            .collect()
    }
}
