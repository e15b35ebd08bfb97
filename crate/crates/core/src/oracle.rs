//! Dense single-context reference implementations used as test oracles:
//! the polynomial spectral convolution, the dense layer recursion
//! `H_k = act(L H_{k-1} W_k)`, and its chain-rule backward.

use crate::graph::{Graph, NormMode};
use crate::nn::Activation;
use crate::tensor::{Real, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Oracle graphs are capped: this module exists for tests, not throughput.
const MAX_DENSE_NODES: usize = 256;

/// Dense adjacency, normalized Laplacian and features of a small graph.
#[derive(Debug, Clone)]
pub struct DenseGraph {
    pub adjacency: Tensor,
    pub laplacian: Tensor,
    pub features: Tensor,
    pub degrees: Vec<Real>,
}

impl DenseGraph {
    pub fn from_graph(graph: &Graph) -> Self {
        let n = graph.num_nodes;
        assert!(n <= MAX_DENSE_NODES, "dense oracle capped at {MAX_DENSE_NODES} nodes");
        // Row = receiver, column = sender, so `(A X)_i` sums over the
        // stored in-edges of i — the same direction the gather stage
        // delivers messages. Multi-edges pool linearly. Degrees follow the
        // store's convention (weighted out-edge sums; identical to in-sums
        // on symmetrized graphs).
        let mut a = Tensor::zeros(n, n);
        for (eid, &(s, d)) in graph.edges.iter().enumerate() {
            let v = a.at(d as usize, s as usize) + graph.edge_weights[eid];
            a.set(d as usize, s as usize, v);
        }
        let degrees = graph.degrees.clone();
        let mut l = Tensor::identity(n);
        for i in 0..n {
            for j in 0..n {
                let w = a.at(i, j);
                if w == 0.0 {
                    continue;
                }
                let (di, dj) = (degrees[i], degrees[j]);
                if di == 0.0 || dj == 0.0 {
                    continue;
                }
                let norm = w / (di * dj).sqrt();
                l.set(i, j, l.at(i, j) - norm);
            }
        }
        Self {
            adjacency: a,
            laplacian: l,
            features: graph.node_features.clone(),
            degrees,
        }
    }

    /// Propagation matrix for the chosen normalization mode, matching the
    /// engine's per-edge coefficients plus diagonal terms.
    pub fn propagation_matrix(&self, mode: NormMode) -> Tensor {
        match mode {
            NormMode::Laplacian => self.laplacian.clone(),
            NormMode::Renormalized => {
                let n = self.adjacency.rows();
                let dt: Vec<Real> = self.degrees.iter().map(|&d| d + 1.0).collect();
                let mut m = Tensor::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        let w = self.adjacency.at(i, j) + if i == j { 1.0 } else { 0.0 };
                        if w != 0.0 {
                            m.set(i, j, w / (dt[i] * dt[j]).sqrt());
                        }
                    }
                }
                m
            }
        }
    }
}

/// Forward intermediates retained for [`dense_backward`].
#[derive(Debug, Clone)]
pub struct DenseTrace {
    /// H_0 .. H_K (post-activation).
    pub h: Vec<Tensor>,
    /// Z_1 .. Z_K (pre-activation).
    pub z: Vec<Tensor>,
}

/// Runs `H_k = act_k(P H_{k-1} W_k)` with `H_0 = X` over an explicit
/// propagation matrix.
pub fn dense_forward_with(
    prop: &Tensor,
    features: &Tensor,
    weights: &[Tensor],
    activations: &[Activation],
) -> DenseTrace {
    assert_eq!(weights.len(), activations.len(), "one activation per layer");
    let mut h = vec![features.clone()];
    let mut z = Vec::new();
    for (w, act) in weights.iter().zip(activations) {
        let zk = prop.matmul(&h.last().unwrap().matmul(w));
        let mut hk = zk.clone();
        act.apply(hk.data_mut());
        z.push(zk);
        h.push(hk);
    }
    DenseTrace { h, z }
}

/// The spectral-form dense recursion over the normalized Laplacian.
pub fn dense_gcn_forward(
    dg: &DenseGraph,
    weights: &[Tensor],
    activations: &[Activation],
) -> DenseTrace {
    dense_forward_with(&dg.laplacian, &dg.features, weights, activations)
}

/// Dense chain rule through the recursion: given dL/dH_K, produces dL/dX and
/// every dL/dW_k.
pub fn dense_backward_with(
    prop: &Tensor,
    weights: &[Tensor],
    activations: &[Activation],
    trace: &DenseTrace,
    upstream: &Tensor,
) -> (Tensor, Vec<Tensor>) {
    let k = weights.len();
    assert_eq!(trace.z.len(), k, "trace must come from the same forward");
    let prop_t = prop.transpose();
    let mut grad_h = upstream.clone();
    let mut grad_w = vec![Tensor::zeros(0, 0); k];
    for layer in (0..k).rev() {
        // dZ = dH .* act'(Z) elementwise
        let mut gz = grad_h.clone();
        activations[layer].apply_deriv(trace.z[layer].data(), gz.data_mut());
        // dW = (P H_{k-1})^T dZ
        let ph = prop.matmul(&trace.h[layer]);
        grad_w[layer] = ph.t_matmul(&gz);
        // dH_{k-1} = P^T dZ W^T
        grad_h = prop_t.matmul(&gz.matmul_t(&weights[layer]));
    }
    (grad_h, grad_w)
}

pub fn dense_backward(
    dg: &DenseGraph,
    weights: &[Tensor],
    activations: &[Activation],
    trace: &DenseTrace,
    upstream: &Tensor,
) -> (Tensor, Vec<Tensor>) {
    dense_backward_with(&dg.laplacian, weights, activations, trace, upstream)
}

/// Largest eigenvalue of a symmetric matrix by seeded power iteration.
pub fn power_iteration(mat: &Tensor, iters: usize, tol: f64, seed: u64) -> Real {
    let n = mat.rows();
    assert_eq!(n, mat.cols());
    if n == 0 {
        return 0.0;
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut v: Vec<Real> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let mut lambda: Real = 0.0;
    for _ in 0..iters {
        let vt = Tensor::from_vec(n, 1, v.clone());
        let w = mat.matmul(&vt);
        let norm: Real = w.data().iter().map(|x| x * x).sum::<Real>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next: Vec<Real> = w.data().iter().map(|x| x / norm).collect();
        let mut rayleigh = 0.0;
        for i in 0..n {
            rayleigh += next[i] * mat.row(i).iter().zip(&next).map(|(a, b)| a * b).sum::<Real>();
        }
        if (rayleigh - lambda).abs() < tol as Real {
            return rayleigh;
        }
        lambda = rayleigh;
        v = next;
    }
    lambda
}

/// K-order Chebyshev filter `sum theta_k T_k(L^) x` via the three-term
/// recursion, using matrix-vector products only.
pub fn chebyshev_filter(dg: &DenseGraph, x: &[Real], coeffs: &[Real], lambda_max: Real) -> Vec<Real> {
    assert!(lambda_max > 0.0, "lambda_max must be positive");
    let n = dg.laplacian.rows();
    assert_eq!(x.len(), n);
    // L^ = 2 L / lambda_max - I applied as a matvec.
    let scaled_matvec = |v: &[Real]| -> Vec<Real> {
        let vt = Tensor::from_vec(n, 1, v.to_vec());
        let lv = dg.laplacian.matmul(&vt);
        lv.data()
            .iter()
            .zip(v)
            .map(|(&l, &vi)| 2.0 * l / lambda_max - vi)
            .collect()
    };
    let mut out: Vec<Real> = x.iter().map(|&v| coeffs[0] * v).collect();
    if coeffs.len() == 1 {
        return out;
    }
    let mut t_prev = x.to_vec(); // T_0 x
    let mut t_cur = scaled_matvec(x); // T_1 x
    for (o, &t) in out.iter_mut().zip(&t_cur) {
        *o += coeffs[1] * t;
    }
    for &c in &coeffs[2..] {
        // T_k = 2 L^ T_{k-1} - T_{k-2}
        let mut t_next = scaled_matvec(&t_cur);
        for (t, &p) in t_next.iter_mut().zip(&t_prev) {
            *t = 2.0 * *t - p;
        }
        for (o, &t) in out.iter_mut().zip(&t_next) {
            *o += c * t;
        }
        t_prev = t_cur;
        t_cur = t_next;
    }
    out
}

/// Convenience: power-iteration estimate of the Laplacian's largest
/// eigenvalue with the module's standard settings.
pub fn laplacian_lambda_max(dg: &DenseGraph, seed: u64) -> Real {
    power_iteration(&dg.laplacian, 100, 1e-9, seed)
}

/// Seeded random dense weights in [-1, 1], for oracle comparisons.
pub fn random_weights(dims: &[usize], seed: u64) -> Vec<Tensor> {
    let mut rng = StdRng::seed_from_u64(seed);
    dims.windows(2)
        .map(|w| {
            Tensor::from_vec(
                w[0],
                w[1],
                (0..w[0] * w[1]).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
        })
        .collect()
}
