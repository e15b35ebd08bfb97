//! Reverse-mode differentiation over a recorded sequence of primitive ops.
//!
//! Stage functions (projection, propagation, aggregation, apply, decoder)
//! are written against [`Tape`] builders; the backward pass replays the
//! recorded ops in exact reverse order, so every composed function gets a
//! matched derivative for free. Inputs may be whole row batches: every
//! primitive is row-local except the explicit batch reductions (`matmul`
//! against a parameter, bias row sums, summed cross-entropy), which route
//! through [`GradSink`] so deterministic mode can accumulate them exactly.

use crate::error::{CoreError, Result};
use crate::nn::param::{GradSink, ParamId, ParameterSet};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(ValId, ValId),
    AddBiasRow(ValId, ValId),
    Add(ValId, ValId),
    Sub(ValId, ValId),
    Mul(ValId, ValId),
    MulCol(ValId, ValId),
    MulScalar(ValId, ValId),
    Scale(ValId, Real),
    Relu(ValId),
    LeakyRelu(ValId, Real),
    Tanh(ValId),
    Exp(ValId),
    Concat(ValId, ValId),
    Dropout(ValId),
    SoftmaxXentSum(ValId),
}

#[derive(Debug, Clone)]
enum Saved {
    None,
    Mask(Vec<Real>),
    Probs {
        probs: Tensor,
        labels: Vec<u32>,
        divisor: f64,
        row_losses: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    saved: Saved,
}

/// Ordered record of executed primitive ops with saved inputs for backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    err: Option<CoreError>,
}

/// Gradients produced by one backward sweep, addressable by [`ValId`].
pub struct TapeGrads {
    grads: Vec<Option<Tensor>>,
}

impl TapeGrads {
    pub fn take(&mut self, id: ValId) -> Option<Tensor> {
        self.grads[id.0].take()
    }

    pub fn get(&self, id: ValId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.err = None;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Per-row loss terms of a summed cross-entropy node (already divided by
    /// the global divisor). Used by deterministic loss accumulation.
    pub fn row_losses(&self, id: ValId) -> &[f64] {
        match &self.nodes[id.0].saved {
            Saved::Probs { row_losses, .. } => row_losses,
            _ => panic!("row_losses on a non-loss node"),
        }
    }

    /// First non-finite result recorded while building, if any.
    pub fn take_err(&mut self) -> Result<()> {
        match self.err.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, saved: Saved, name: &str) -> ValId {
        if self.err.is_none() && !value.all_finite() {
            self.err = Some(CoreError::NonFinite {
                op: name.to_string(),
            });
        }
        self.nodes.push(Node { op, value, saved });
        ValId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> ValId {
        self.push(Op::Input, value, Saved::None, "input")
    }

    pub fn input_row(&mut self, row: &[Real]) -> ValId {
        self.input(Tensor::row_vec(row.to_vec()))
    }

    pub fn param(&mut self, set: &ParameterSet, id: ParamId) -> ValId {
        self.push(Op::Param(id), set.value(id).clone(), Saved::None, "param")
    }

    pub fn matmul(&mut self, a: ValId, b: ValId) -> ValId {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(Op::MatMul(a, b), v, Saved::None, "matmul")
    }

    /// Matrix product with an optional broadcast bias row.
    pub fn linear(&mut self, x: ValId, w: ValId, bias: Option<ValId>) -> ValId {
        let y = self.matmul(x, w);
        match bias {
            Some(b) => self.add_bias_row(y, b),
            None => y,
        }
    }

    pub fn add_bias_row(&mut self, x: ValId, bias: ValId) -> ValId {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        assert_eq!(xv.cols(), bv.cols(), "bias width");
        let mut v = xv.clone();
        for r in 0..v.rows() {
            for (o, &b) in v.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += b;
            }
        }
        self.push(Op::AddBiasRow(x, bias), v, Saved::None, "add_bias")
    }

    fn binary_same_shape(&self, a: ValId, b: ValId, op: &str) {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "{op} operand shapes"
        );
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> ValId {
        self.binary_same_shape(a, b, "add");
        let mut v = self.nodes[a.0].value.clone();
        v.add_assign(&self.nodes[b.0].value);
        self.push(Op::Add(a, b), v, Saved::None, "add")
    }

    pub fn sub(&mut self, a: ValId, b: ValId) -> ValId {
        self.binary_same_shape(a, b, "sub");
        let mut v = self.nodes[a.0].value.clone();
        for (o, &x) in v.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o -= x;
        }
        self.push(Op::Sub(a, b), v, Saved::None, "sub")
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> ValId {
        self.binary_same_shape(a, b, "mul");
        let mut v = self.nodes[a.0].value.clone();
        for (o, &x) in v.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= x;
        }
        self.push(Op::Mul(a, b), v, Saved::None, "mul")
    }

    /// Broadcast-multiplies each row of `x` by the matching entry of a column
    /// vector `c` (`n x 1`).
    pub fn mul_col(&mut self, x: ValId, c: ValId) -> ValId {
        let xv = &self.nodes[x.0].value;
        let cv = &self.nodes[c.0].value;
        assert_eq!(cv.cols(), 1, "mul_col needs a column vector");
        assert_eq!(xv.rows(), cv.rows(), "mul_col row counts");
        let mut v = xv.clone();
        for r in 0..v.rows() {
            let s = cv.at(r, 0);
            for o in v.row_mut(r) {
                *o *= s;
            }
        }
        self.push(Op::MulCol(x, c), v, Saved::None, "mul_col")
    }

    /// Multiplies a tensor by a `1 x 1` scalar tensor.
    pub fn mul_scalar(&mut self, x: ValId, s: ValId) -> ValId {
        assert_eq!(self.nodes[s.0].value.shape(), [1, 1], "mul_scalar operand");
        let sv = self.nodes[s.0].value.at(0, 0);
        let mut v = self.nodes[x.0].value.clone();
        v.scale_assign(sv);
        self.push(Op::MulScalar(x, s), v, Saved::None, "mul_scalar")
    }

    pub fn scale(&mut self, x: ValId, c: Real) -> ValId {
        let mut v = self.nodes[x.0].value.clone();
        v.scale_assign(c);
        self.push(Op::Scale(x, c), v, Saved::None, "scale")
    }

    pub fn relu(&mut self, x: ValId) -> ValId {
        let mut v = self.nodes[x.0].value.clone();
        for o in v.data_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        self.push(Op::Relu(x), v, Saved::None, "relu")
    }

    pub fn leaky_relu(&mut self, x: ValId, slope: Real) -> ValId {
        let mut v = self.nodes[x.0].value.clone();
        for o in v.data_mut() {
            if *o < 0.0 {
                *o *= slope;
            }
        }
        self.push(Op::LeakyRelu(x, slope), v, Saved::None, "leaky_relu")
    }

    pub fn tanh(&mut self, x: ValId) -> ValId {
        let mut v = self.nodes[x.0].value.clone();
        for o in v.data_mut() {
            *o = o.tanh();
        }
        self.push(Op::Tanh(x), v, Saved::None, "tanh")
    }

    pub fn exp(&mut self, x: ValId) -> ValId {
        let mut v = self.nodes[x.0].value.clone();
        for o in v.data_mut() {
            *o = o.exp();
        }
        self.push(Op::Exp(x), v, Saved::None, "exp")
    }

    /// Row-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: ValId, b: ValId) -> ValId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.rows(), bv.rows(), "concat row counts");
        let (n, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut v = Tensor::zeros(n, p + q);
        for r in 0..n {
            v.row_mut(r)[..p].copy_from_slice(av.row(r));
            v.row_mut(r)[p..].copy_from_slice(bv.row(r));
        }
        self.push(Op::Concat(a, b), v, Saved::None, "concat")
    }

    /// Inverted dropout with a caller-provided keep mask (entries 0 or
    /// 1/keep). The mask is saved for backward.
    pub fn dropout(&mut self, x: ValId, mask: Vec<Real>) -> ValId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(mask.len(), xv.len(), "dropout mask length");
        let mut v = xv.clone();
        for (o, &m) in v.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(Op::Dropout(x), v, Saved::Mask(mask), "dropout")
    }

    /// Summed softmax cross-entropy over labeled rows, divided by `divisor`
    /// (the global labeled count, so partition partials add up to the mean).
    pub fn softmax_xent_sum(&mut self, logits: ValId, labels: &[u32], divisor: usize) -> ValId {
        let z = &self.nodes[logits.0].value;
        assert_eq!(z.rows(), labels.len(), "one label per row");
        assert!(divisor > 0, "empty label set");
        let c = z.cols();
        let mut probs = Tensor::zeros(z.rows(), c);
        let mut row_losses = Vec::with_capacity(z.rows());
        let mut total = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = z.row(r);
            let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - m).exp();
            }
            let log_denom = denom.ln();
            for (j, &v) in row.iter().enumerate() {
                probs.set(r, j, ((v - m) - log_denom).exp());
            }
            let label = label as usize;
            assert!(label < c, "label {label} out of range {c}");
            let l = (-((row[label] - m) - log_denom)) as f64 / divisor as f64;
            row_losses.push(l);
            total += l;
        }
        let v = Tensor::from_vec(1, 1, vec![total as Real]);
        self.push(
            Op::SoftmaxXentSum(logits),
            v,
            Saved::Probs {
                probs,
                labels: labels.to_vec(),
                divisor: divisor as f64,
                row_losses,
            },
            "softmax_xent",
        )
    }

    /// Replays the tape in reverse from `seed`, accumulating parameter
    /// gradients into `sink` and returning per-value gradients.
    pub fn backward(&self, seed: ValId, seed_grad: Tensor, sink: &mut GradSink) -> TapeGrads {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        assert_eq!(
            seed_grad.shape(),
            self.nodes[seed.0].value.shape(),
            "seed grad shape"
        );
        grads[seed.0] = Some(seed_grad);

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Input => {
                    grads[idx] = Some(g); // keep for the caller
                }
                Op::Param(pid) => {
                    sink.accumulate(*pid, &g);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let ga = g.matmul_t(bv);
                    self.route(&mut grads, *a, ga, sink);
                    if let Op::Param(pid) = self.nodes[b.0].op {
                        // Batch reduction: let the sink control exactness.
                        sink.accumulate_outer(pid, av, &g);
                    } else {
                        let gb = av.t_matmul(&g);
                        self.route(&mut grads, *b, gb, sink);
                    }
                }
                Op::AddBiasRow(x, bias) => {
                    if let Op::Param(pid) = self.nodes[bias.0].op {
                        sink.accumulate_row_sums(pid, &g);
                    } else {
                        let mut gb = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        self.route(&mut grads, *bias, gb, sink);
                    }
                    self.route(&mut grads, *x, g, sink);
                }
                Op::Add(a, b) => {
                    self.route(&mut grads, *a, g.clone(), sink);
                    self.route(&mut grads, *b, g, sink);
                }
                Op::Sub(a, b) => {
                    let mut gb = g.clone();
                    gb.scale_assign(-1.0);
                    self.route(&mut grads, *a, g, sink);
                    self.route(&mut grads, *b, gb, sink);
                }
                Op::Mul(a, b) => {
                    let mut ga = g.clone();
                    for (o, &x) in ga.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                        *o *= x;
                    }
                    let mut gb = g;
                    for (o, &x) in gb.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        *o *= x;
                    }
                    self.route(&mut grads, *a, ga, sink);
                    self.route(&mut grads, *b, gb, sink);
                }
                Op::MulCol(x, c) => {
                    let xv = &self.nodes[x.0].value;
                    let cv = &self.nodes[c.0].value;
                    let mut gx = g.clone();
                    let mut gc = Tensor::zeros(cv.rows(), 1);
                    for r in 0..g.rows() {
                        let s = cv.at(r, 0);
                        let mut dot = 0.0;
                        for (o, (&gv, &xv)) in
                            gx.row_mut(r).iter_mut().zip(g.row(r).iter().zip(xv.row(r)))
                        {
                            *o = gv * s;
                            dot += gv * xv;
                        }
                        gc.set(r, 0, dot);
                    }
                    self.route(&mut grads, *x, gx, sink);
                    self.route(&mut grads, *c, gc, sink);
                }
                Op::MulScalar(x, s) => {
                    let sv = self.nodes[s.0].value.at(0, 0);
                    let xv = &self.nodes[x.0].value;
                    let mut gx = g.clone();
                    gx.scale_assign(sv);
                    let mut dot = 0.0;
                    for (&gv, &x) in g.data().iter().zip(xv.data()) {
                        dot += gv * x;
                    }
                    self.route(&mut grads, *x, gx, sink);
                    self.route(&mut grads, *s, Tensor::from_vec(1, 1, vec![dot]), sink);
                }
                Op::Scale(x, c) => {
                    let mut gx = g;
                    gx.scale_assign(*c);
                    self.route(&mut grads, *x, gx, sink);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = g;
                    for (o, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *o = 0.0;
                        }
                    }
                    self.route(&mut grads, *x, gx, sink);
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = g;
                    for (o, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *o *= slope;
                        }
                    }
                    self.route(&mut grads, *x, gx, sink);
                }
                Op::Tanh(x) => {
                    let yv = &self.nodes[idx].value;
                    let mut gx = g;
                    for (o, &y) in gx.data_mut().iter_mut().zip(yv.data()) {
                        *o *= 1.0 - y * y;
                    }
                    self.route(&mut grads, *x, gx, sink);
                }
                Op::Exp(x) => {
                    let yv = &self.nodes[idx].value;
                    let mut gx = g;
                    for (o, &y) in gx.data_mut().iter_mut().zip(yv.data()) {
                        *o *= y;
                    }
                    self.route(&mut grads, *x, gx, sink);
                }
                Op::Concat(a, b) => {
                    let p = self.nodes[a.0].value.cols();
                    let q = self.nodes[b.0].value.cols();
                    let n = g.rows();
                    let mut ga = Tensor::zeros(n, p);
                    let mut gb = Tensor::zeros(n, q);
                    for r in 0..n {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..p]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[p..]);
                    }
                    self.route(&mut grads, *a, ga, sink);
                    self.route(&mut grads, *b, gb, sink);
                }
                Op::Dropout(x) => {
                    let Saved::Mask(mask) = &self.nodes[idx].saved else {
                        unreachable!()
                    };
                    let mut gx = g;
                    for (o, &m) in gx.data_mut().iter_mut().zip(mask) {
                        *o *= m;
                    }
                    self.route(&mut grads, *x, gx, sink);
                }
                Op::SoftmaxXentSum(logits) => {
                    let Saved::Probs {
                        probs,
                        labels,
                        divisor,
                        ..
                    } = &self.nodes[idx].saved
                    else {
                        unreachable!()
                    };
                    let scale = (g.at(0, 0) as f64 / divisor) as Real;
                    let mut gl = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        let row = gl.row_mut(r);
                        row[label as usize] -= 1.0;
                        for o in row {
                            *o *= scale;
                        }
                    }
                    self.route(&mut grads, *logits, gl, sink);
                }
            }
        }
        TapeGrads { grads }
    }

    fn route(
        &self,
        grads: &mut [Option<Tensor>],
        target: ValId,
        g: Tensor,
        sink: &mut GradSink,
    ) {
        if let Op::Param(pid) = self.nodes[target.0].op {
            sink.accumulate(pid, &g);
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_sink() -> (ParameterSet, GradSink) {
        let set = ParameterSet::new();
        let sink = GradSink::new(&set, false);
        (set, sink)
    }

    #[test]
    fn linear_identity_input() {
        let mut set = ParameterSet::new();
        let w = set.push("w", Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::identity(2));
        let wid = tape.param(&set, w);
        let y = tape.linear(x, wid, None);
        assert_eq!(tape.value(y), set.value(w));
    }

    #[test]
    fn zero_weight_annihilates() {
        let mut set = ParameterSet::new();
        let w = set.push("w", Tensor::zeros(3, 2));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(2, 3, vec![1.0, -5.0, 2.0, 0.5, 9.0, -2.0]));
        let wid = tape.param(&set, w);
        let y = tape.matmul(x, wid);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_values_and_grads() {
        let (_, mut sink) = empty_sink();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let mut grads = tape.backward(y, Tensor::row_vec(vec![1.0, 1.0, 1.0]), &mut sink);
        // Subgradient at 0 is 0 by convention.
        assert_eq!(grads.take(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_backward_formulas() {
        let mut set = ParameterSet::new();
        let w = set.push("w", Tensor::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]));
        let b = set.push("b", Tensor::row_vec(vec![0.1, -0.1]));
        let mut sink = GradSink::new(&set, false);
        let mut tape = Tape::new();
        let xv = Tensor::from_vec(3, 2, vec![1.0, 2.0, -1.0, 0.0, 4.0, 0.5]);
        let x = tape.input(xv.clone());
        let wid = tape.param(&set, w);
        let bid = tape.param(&set, b);
        let y = tape.linear(x, wid, Some(bid));
        let gv = Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0]);
        let mut grads = tape.backward(y, gv.clone(), &mut sink);
        let gx = grads.take(x).unwrap();
        // grad_x = g W^T, grad_W = x^T g, grad_b = column sums of g.
        assert!(gx.max_abs_diff(&gv.matmul_t(set.value(w))) < 1e-14);
        let out = sink.into_grads();
        assert!(out[w].max_abs_diff(&xv.t_matmul(&gv)) < 1e-14);
        assert_eq!(out[b].data(), &[3.0, 0.0]);
    }

    #[test]
    fn softmax_uniform_logits_loss_is_ln_c() {
        let (_, mut sink) = empty_sink();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(3, 4));
        let loss = tape.softmax_xent_sum(x, &[0, 1, 3], 3);
        let got = tape.value(loss).at(0, 0);
        assert!((got - (4.0f64).ln() as Real).abs() < 1e-12);
        let mut grads = tape.backward(loss, Tensor::from_vec(1, 1, vec![1.0]), &mut sink);
        let g = grads.take(x).unwrap();
        // Rows sum to zero and the labeled entry carries (p - 1)/n.
        assert!((g.at(0, 0) - (0.25 - 1.0) / 3.0).abs() < 1e-12);
        assert!((g.at(0, 1) - 0.25 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_confident_row_closed_form() {
        let (_, mut sink) = empty_sink();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(1, 2, vec![10.0, -10.0]));
        let loss = tape.softmax_xent_sum(x, &[0], 1);
        // -ln(sigmoid(20)) = ln(1 + e^-20)
        let expect = (1.0f64 + (-20.0f64).exp()).ln();
        assert!((tape.value(loss).at(0, 0) as f64 - expect).abs() < 1e-18);
        let mut grads = tape.backward(loss, Tensor::from_vec(1, 1, vec![1.0]), &mut sink);
        let g = grads.take(x).unwrap();
        assert!((g.at(0, 0) as f64 + 2.0611536e-9).abs() < 1e-12);
        assert!((g.at(0, 1) as f64 - 2.0611536e-9).abs() < 1e-12);
    }

    #[test]
    fn backward_twice_doubles_param_grads() {
        let mut set = ParameterSet::new();
        let w = set.push("w", Tensor::from_vec(2, 2, vec![0.3, -1.0, 2.0, 0.7]));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let wid = tape.param(&set, w);
        let y = tape.matmul(x, wid);
        let t = tape.tanh(y);
        let seed = Tensor::from_vec(2, 2, vec![1.0; 4]);

        let mut once = GradSink::new(&set, false);
        tape.backward(t, seed.clone(), &mut once);
        let g1 = once.into_grads();

        let mut twice = GradSink::new(&set, false);
        tape.backward(t, seed.clone(), &mut twice);
        tape.backward(t, seed, &mut twice);
        let g2 = twice.into_grads();

        for (a, b) in g1[w].data().iter().zip(g2[w].data()) {
            assert_eq!((*a * 2.0).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn replay_is_bit_deterministic() {
        let mut set = ParameterSet::new();
        let w = set.push("w", Tensor::from_vec(3, 3, vec![0.1; 9]));
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.25, -1.5]));
            let wid = tape.param(&set, w);
            let y = tape.matmul(x, wid);
            let z = tape.tanh(y);
            let mut sink = GradSink::new(&set, false);
            let mut grads = tape.backward(z, Tensor::from_vec(2, 3, vec![1.0; 6]), &mut sink);
            (
                tape.value(z).data().to_vec(),
                grads.take(x).unwrap().data().to_vec(),
                sink.into_grads()[w].data().to_vec(),
            )
        };
        let (v1, gx1, gw1) = run();
        let (v2, gx2, gw2) = run();
        for (a, b) in v1.iter().zip(&v2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in gx1.iter().zip(&gx2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in gw1.iter().zip(&gw2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn non_finite_trips_error() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row_vec(vec![1e300]));
        let y = tape.exp(x);
        let _ = y;
        assert!(tape.take_err().is_err());
    }
}
