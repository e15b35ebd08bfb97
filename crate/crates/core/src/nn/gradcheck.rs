//! Central finite-difference validation of tape backward passes.

use crate::error::Result;
use crate::nn::param::{GradSink, ParameterSet};
use crate::nn::tape::{Tape, ValId};
use crate::tensor::{Real, Tensor};

/// A differentiable scalar function of inputs and parameters.
pub type ScalarFn<'a> = &'a dyn Fn(&mut Tape, &[ValId], &ParameterSet) -> ValId;

#[derive(Debug, Clone, Copy)]
pub struct CheckOpts {
    pub eps: f64,
    pub tol: f64,
    /// Self-test hook: negates the analytic gradients before comparison so a
    /// correct check must report FAIL.
    pub negate_analytic: bool,
}

impl Default for CheckOpts {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            tol: 1e-6,
            negate_analytic: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub components: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-8 {
        (a - n).abs()
    } else {
        (a - n).abs() / denom
    }
}

fn eval(f: ScalarFn, inputs: &[Tensor], params: &ParameterSet) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<ValId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &ids, params);
    tape.take_err()?;
    let v = tape.value(out);
    assert_eq!(v.shape(), [1, 1], "grad_check target must be scalar");
    Ok(v.at(0, 0) as f64)
}

/// Compares tape backward gradients of `f` against central finite
/// differences, over every input component and every parameter component.
pub fn grad_check(
    f: ScalarFn,
    inputs: &[Tensor],
    params: &ParameterSet,
    opts: CheckOpts,
) -> Result<GradCheckReport> {
    // Analytic gradients from one tape replay.
    let mut tape = Tape::new();
    let ids: Vec<ValId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &ids, params);
    tape.take_err()?;
    let mut sink = GradSink::new(params, false);
    let mut grads = tape.backward(out, Tensor::from_vec(1, 1, vec![1.0]), &mut sink);
    let input_grads: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();
    let param_grads = sink.into_grads();

    let flip = if opts.negate_analytic { -1.0 } else { 1.0 };
    let mut max_err = 0.0f64;
    let mut components = 0usize;

    // Inputs.
    for (i, t) in inputs.iter().enumerate() {
        for c in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += opts.eps as Real;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= opts.eps as Real;
            let numeric = (eval(f, &plus, params)? - eval(f, &minus, params)?) / (2.0 * opts.eps);
            let analytic = flip * input_grads[i].data()[c] as f64;
            max_err = max_err.max(rel_err(analytic, numeric));
            components += 1;
        }
    }

    // Parameters.
    #[allow(clippy::needless_range_loop)] // clone-perturb per parameter
    for pid in 0..params.len() {
        for c in 0..params.value(pid).len() {
            let mut plus = params.clone();
            plus.value_mut(pid).data_mut()[c] += opts.eps as Real;
            let mut minus = params.clone();
            minus.value_mut(pid).data_mut()[c] -= opts.eps as Real;
            let numeric = (eval(f, inputs, &plus)? - eval(f, inputs, &minus)?) / (2.0 * opts.eps);
            let analytic = flip * param_grads[pid].data()[c] as f64;
            max_err = max_err.max(rel_err(analytic, numeric));
            components += 1;
        }
    }

    Ok(GradCheckReport {
        components,
        max_rel_err: max_err,
        pass: max_err < opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_tensor(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn linear_layer_passes_at_1e6() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut params = ParameterSet::new();
        let w = params.push("w", random_tensor(&mut rng, 4, 2));
        let b = params.push("b", random_tensor(&mut rng, 1, 2));
        let x = random_tensor(&mut rng, 3, 4);
        let f: ScalarFn = &|tape, ids, ps| {
            let wid = tape.param(ps, w);
            let bid = tape.param(ps, b);
            let y = tape.linear(ids[0], wid, Some(bid));
            let t = tape.tanh(y);
            let labels = vec![0, 1, 0];
            tape.softmax_xent_sum(t, &labels, 3)
        };
        let report = grad_check(f, &[x], &params, CheckOpts::default()).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        assert!(report.components > 0);
    }

    #[test]
    fn tanh_grad_on_random_vector() {
        let mut rng = StdRng::seed_from_u64(5);
        let x = random_tensor(&mut rng, 1, 5);
        let params = ParameterSet::new();
        let f: ScalarFn = &|tape, ids, _| {
            let t = tape.tanh(ids[0]);
            let sq = tape.mul(t, t);
            let labels = vec![0];
            // Reduce to a scalar through a stable path: softmax over the row.
            tape.softmax_xent_sum(sq, &labels, 1)
        };
        let report = grad_check(f, &[x], &params, CheckOpts::default()).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // One scalar function per primitive, randomized shapes within 8x8.
        let mut rng = StdRng::seed_from_u64(99);
        let n = rng.gen_range(2..6);
        let a = rng.gen_range(2..8);
        let b = rng.gen_range(2..8);
        let to_scalar = |tape: &mut Tape, x: ValId| {
            // Stable scalarization through a labeled softmax row sum.
            let t = tape.tanh(x);
            let rows = tape.value(t).rows();
            let labels: Vec<u32> = (0..rows).map(|r| (r % 2) as u32).collect();
            tape.softmax_xent_sum(t, &labels, rows)
        };
        type Case<'a> = (&'a str, Box<dyn Fn(&mut Tape, &[ValId]) -> ValId>, Vec<Tensor>);
        let mask: Vec<Real> = (0..n * a)
            .map(|i| if i % 3 == 0 { 0.0 } else { 2.0 })
            .collect();
        let cases: Vec<Case> = vec![
            (
                "matmul",
                Box::new(move |t, ids| t.matmul(ids[0], ids[1])),
                vec![random_tensor(&mut rng, n, a), random_tensor(&mut rng, a, b)],
            ),
            (
                "add_bias_row",
                Box::new(move |t, ids| t.add_bias_row(ids[0], ids[1])),
                vec![random_tensor(&mut rng, n, b), random_tensor(&mut rng, 1, b)],
            ),
            (
                "add",
                Box::new(move |t, ids| t.add(ids[0], ids[1])),
                vec![random_tensor(&mut rng, n, a), random_tensor(&mut rng, n, a)],
            ),
            (
                "sub",
                Box::new(move |t, ids| t.sub(ids[0], ids[1])),
                vec![random_tensor(&mut rng, n, a), random_tensor(&mut rng, n, a)],
            ),
            (
                "mul",
                Box::new(move |t, ids| t.mul(ids[0], ids[1])),
                vec![random_tensor(&mut rng, n, a), random_tensor(&mut rng, n, a)],
            ),
            (
                "mul_col",
                Box::new(move |t, ids| t.mul_col(ids[0], ids[1])),
                vec![random_tensor(&mut rng, n, a), random_tensor(&mut rng, n, 1)],
            ),
            (
                "mul_scalar",
                Box::new(move |t, ids| t.mul_scalar(ids[0], ids[1])),
                vec![random_tensor(&mut rng, n, a), random_tensor(&mut rng, 1, 1)],
            ),
            (
                "scale",
                Box::new(move |t, ids| t.scale(ids[0], -1.7)),
                vec![random_tensor(&mut rng, n, a)],
            ),
            (
                "relu",
                Box::new(move |t, ids| t.relu(ids[0])),
                vec![random_tensor(&mut rng, n, a)],
            ),
            (
                "leaky_relu",
                Box::new(move |t, ids| t.leaky_relu(ids[0], 0.2)),
                vec![random_tensor(&mut rng, n, a)],
            ),
            (
                "tanh",
                Box::new(move |t, ids| t.tanh(ids[0])),
                vec![random_tensor(&mut rng, n, a)],
            ),
            (
                "exp",
                Box::new(move |t, ids| t.exp(ids[0])),
                vec![random_tensor(&mut rng, n, a)],
            ),
            (
                "concat",
                Box::new(move |t, ids| t.concat(ids[0], ids[1])),
                vec![random_tensor(&mut rng, n, a), random_tensor(&mut rng, n, b)],
            ),
            (
                "dropout",
                Box::new(move |t, ids| t.dropout(ids[0], mask.clone())),
                vec![random_tensor(&mut rng, n, a)],
            ),
        ];
        for (name, build, inputs) in cases {
            let f: ScalarFn = &|tape, ids, _| {
                let y = build(tape, ids);
                to_scalar(tape, y)
            };
            let report = grad_check(f, &inputs, &ParameterSet::new(), CheckOpts {
                tol: 1e-5,
                ..Default::default()
            })
            .unwrap();
            assert!(
                report.pass,
                "{name}: max rel err {:.3e} over {} components",
                report.max_rel_err, report.components
            );
        }
    }

    #[test]
    fn corrupted_backward_is_reported() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 1, 4);
        let params = ParameterSet::new();
        let f: ScalarFn = &|tape, ids, _| {
            let t = tape.tanh(ids[0]);
            tape.softmax_xent_sum(t, &[2], 1)
        };
        let opts = CheckOpts {
            negate_analytic: true,
            ..Default::default()
        };
        let report = grad_check(f, &[x], &params, opts).unwrap();
        assert!(!report.pass, "sign flip must fail the check");
    }
}
