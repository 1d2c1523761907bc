//! Finite-difference verification of backward passes.
//!
//! The checker rebuilds the recorded forward pass in `f64`, runs the shared
//! backward kernels at `f64`, and compares every input gradient against
//! central differences of the replayed loss. Production stays 32-bit; the
//! check runs at 64-bit so the comparison measures formula correctness
//! rather than rounding noise.

use alloc::vec::Vec;

use super::tape::{ReplayBuf, Tape, Var};
use super::tensor::Tensor;
use super::NumericsError;

/// Result of a gradient check: the worst relative discrepancy and where it
/// occurred (input index, element index).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_element: usize,
    pub checked: usize,
}

/// Checks the analytic gradient of a scalar-valued tape program against
/// central finite differences.
///
/// `build` receives a fresh tape plus one leaf per input tensor and must
/// return the scalar loss node. Relative error for an element is
/// `|analytic - numeric| / max(|analytic|, |numeric|)`, taken as zero when
/// both magnitudes fall below an absolute floor.
pub fn grad_check<F>(inputs: &[Tensor], build: F, epsilon: f64) -> Result<GradCheckReport, NumericsError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    if tape.value(loss).len() != 1 {
        return Err(NumericsError::ShapeMismatch {
            op: "grad_check loss",
            left: tape.shape(loss).to_vec(),
            right: alloc::vec![],
        });
    }
    if !tape.value(loss)[0].is_finite() {
        return Err(NumericsError::NonFinite);
    }
    let mut buf = ReplayBuf::new();
    let analytic = tape.backward_f64(loss, &mut buf);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_element: 0,
        checked: 0,
    };
    const ABS_FLOOR: f64 = 1e-8;
    for (i, (&var, input)) in vars.iter().zip(inputs).enumerate() {
        let zero_grad: Vec<f64>;
        let grad: &[f64] = match &analytic[var.0] {
            Some(g) => g,
            None => {
                zero_grad = alloc::vec![0.0; input.len()];
                &zero_grad
            }
        };
        for e in 0..input.len() {
            let x = input.data()[e] as f64;
            let step = epsilon * (1.0 + x.abs());
            let up = tape.replay_f64(loss, Some((var, e, x + step)), &mut buf);
            let down = tape.replay_f64(loss, Some((var, e, x - step)), &mut buf);
            if !up.is_finite() || !down.is_finite() {
                return Err(NumericsError::NonFinite);
            }
            let numeric = (up - down) / (2.0 * step);
            let a = grad[e];
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < ABS_FLOOR {
                0.0
            } else {
                (a - numeric).abs() / denom
            };
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = i;
                report.worst_element = e;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::attention::{attention, AttnMask};
    use crate::numerics::softmax_cross_entropy;
    use crate::rng::SeedRng;

    fn randn(rng: &mut SeedRng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gaussian()).collect();
        Tensor::from_rows(rows, cols, data)
    }

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let mut rng = SeedRng::new(21);
        let x = randn(&mut rng, 3, 4);
        let report = grad_check(
            &[x],
            |tape, vars| {
                let x = vars[0];
                let xt = tape.transpose(x);
                let sq = tape.matmul(x, xt); // [3,3]; trace = sum of squares
                // Sum all entries via ones vectors.
                let ones_r = tape.constant(Tensor::from_rows(1, 3, alloc::vec![1.0; 3]));
                let ones_c = tape.constant(Tensor::from_rows(3, 1, alloc::vec![1.0; 3]));
                let rowsum = tape.matmul(ones_r, sq);
                let total = tape.matmul(rowsum, ones_c);
                tape.reshape(total, alloc::vec![])
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "err {}", report.max_rel_err);
    }

    #[test]
    fn constant_function_has_zero_gradient_everywhere() {
        let x = Tensor::from_rows(2, 2, alloc::vec![1.0, -2.0, 0.5, 3.0]);
        let report = grad_check(
            &[x],
            |tape, vars| {
                let _ = vars[0];
                let c = tape.constant(Tensor::scalar(7.5));
                tape.scale(c, 1.0)
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn attention_cross_entropy_composite_passes() {
        let mut rng = SeedRng::new(33);
        let q = randn(&mut rng, 2, 4);
        let k = randn(&mut rng, 2, 4);
        let v = randn(&mut rng, 2, 4);
        let report = grad_check(
            &[q, k, v],
            |tape, vars| {
                let mask = AttnMask::causal(2);
                let out = attention(tape, vars[0], vars[1], vars[2], Some(&mask)).unwrap();
                let last = tape.slice_rows(out, 1, 1);
                softmax_cross_entropy(tape, last, 2).unwrap()
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err {}", report.max_rel_err);
    }

    #[test]
    fn layernorm_gelu_chain_passes() {
        let mut rng = SeedRng::new(44);
        let x = randn(&mut rng, 3, 5);
        let gamma = Tensor::new(alloc::vec![5], (0..5).map(|i| 1.0 + 0.1 * i as f32).collect());
        let beta = Tensor::new(alloc::vec![5], (0..5).map(|i| 0.05 * i as f32).collect());
        let report = grad_check(
            &[x, gamma, beta],
            |tape, vars| {
                let ln = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5);
                let act = tape.gelu(ln);
                let logits = tape.slice_rows(act, 0, 1);
                softmax_cross_entropy(tape, logits, 3).unwrap()
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "err {}", report.max_rel_err);
    }

    #[test]
    fn embedding_gradients_pass() {
        let mut rng = SeedRng::new(55);
        let table = randn(&mut rng, 6, 3);
        let report = grad_check(
            &[table],
            |tape, vars| {
                let e = tape.embed(vars[0], &[1, 4, 1]);
                let logits = tape.slice_rows(e, 2, 1);
                softmax_cross_entropy(tape, logits, 0).unwrap()
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "err {}", report.max_rel_err);
    }
}
