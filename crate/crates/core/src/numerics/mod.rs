//! Minimal tensor/autodiff substrate shared by every trainable module.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use attention::{attention, attention_with_weights, AttnMask};
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{adamw_step, cosine_lr, AdamHyper, OptimizerState};
pub use params::{Bindings, GradStore, ParamSet};
pub use tape::{ReplayBuf, Tape, Var};
pub use tensor::{Scalar, Tensor};

use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NumericsError {
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    RangeError {
        what: &'static str,
        value: u64,
        bound: u64,
    },
    Capacity {
        len: usize,
        max: usize,
    },
    UnknownParam(String),
    NonFinite,
}

impl core::fmt::Display for NumericsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Self::IndexOutOfRange { what, index, bound } => {
                write!(f, "{what}: index {index} out of range (bound {bound})")
            }
            Self::RangeError { what, value, bound } => {
                write!(f, "{what}: value {value} exceeds bound {bound}")
            }
            Self::Capacity { len, max } => {
                write!(f, "sequence length {len} exceeds capacity {max}")
            }
            Self::UnknownParam(name) => write!(f, "unknown parameter {name}"),
            Self::NonFinite => write!(f, "non-finite value encountered"),
        }
    }
}

/// Fixed sinusoidal positional encodings, one row per position.
pub fn sinusoidal_positions(rows: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * width);
    for pos in 0..rows {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let rate = libm::pow(10_000.0, 2.0 * pair / width as f64);
            let angle = pos as f64 / rate;
            let v = if i % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            };
            data.push(v as f32);
        }
    }
    Tensor::new(alloc::vec![rows, width], data)
}

/// Cross-entropy `-log softmax(logits)[target]` for a single logit row.
///
/// Accepts a rank-1 `[V]` or rank-2 `[1, V]` logits node.
pub fn softmax_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    target: usize,
) -> Result<Var, NumericsError> {
    let shape = tape.shape(logits).to_vec();
    let vocab = match shape.as_slice() {
        [v] => *v,
        [1, v] => *v,
        _ => {
            return Err(NumericsError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: shape,
                right: alloc::vec![1, 0],
            })
        }
    };
    if target >= vocab {
        return Err(NumericsError::IndexOutOfRange {
            what: "softmax_cross_entropy target",
            index: target,
            bound: vocab,
        });
    }
    let row = if shape.len() == 1 {
        tape.reshape(logits, alloc::vec![1, vocab])
    } else {
        logits
    };
    Ok(tape.cross_entropy_mean(row, &[target as u32], &[true]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(alloc::vec![64], alloc::vec![0.0; 64]), true);
        let loss = softmax_cross_entropy(&mut tape, logits, 7).unwrap();
        let expected = libm::log(64.0);
        assert!((tape.value(loss)[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn dominant_target_logit_drives_loss_to_zero() {
        let mut tape = Tape::new();
        let mut data = alloc::vec![0.0f32; 8];
        data[3] = 50.0;
        let logits = tape.leaf(Tensor::new(alloc::vec![8], data), true);
        let loss = softmax_cross_entropy(&mut tape, logits, 3).unwrap();
        assert!(tape.value(loss)[0] < 1e-6);
    }

    #[test]
    fn hand_evaluated_three_logit_case() {
        // -log(e^3 / (e^1 + e^2 + e^3)) evaluated independently in f64.
        let expected = -(libm::exp(3.0) / (libm::exp(1.0) + libm::exp(2.0) + libm::exp(3.0))).ln();
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(alloc::vec![3], alloc::vec![1.0, 2.0, 3.0]), true);
        let loss = softmax_cross_entropy(&mut tape, logits, 2).unwrap();
        assert!((tape.value(loss)[0] as f64 - expected).abs() < 1e-6);
        assert!((expected - 0.4076).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_target_is_an_error() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(alloc::vec![4], alloc::vec![0.0; 4]), true);
        assert!(softmax_cross_entropy(&mut tape, logits, 4).is_err());
    }

    #[test]
    fn loss_is_nonnegative_and_ln_v_only_for_uniform() {
        let mut rng = crate::rng::SeedRng::new(2);
        for _ in 0..50 {
            let v = 2 + rng.below(30);
            let data: Vec<f32> = (0..v).map(|_| rng.gaussian()).collect();
            let uniform = data.iter().all(|&x| x == data[0]);
            let mut tape = Tape::new();
            let logits = tape.leaf(Tensor::new(alloc::vec![v], data), true);
            let target = rng.below(v);
            let loss_var = softmax_cross_entropy(&mut tape, logits, target).unwrap();
            let loss = tape.value(loss_var)[0];
            assert!(loss >= 0.0);
            let ln_v = libm::log(v as f64) as f32;
            if !uniform {
                // Gaussian draws are almost surely non-uniform; the loss can
                // only equal ln V when all logits coincide.
                assert!((loss - ln_v).abs() > 1e-7 || loss > ln_v);
            }
        }
    }
}
