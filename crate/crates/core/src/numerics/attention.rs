//! Scaled dot-product attention built from tape primitives.

use alloc::vec;
use alloc::vec::Vec;

use super::tape::{Tape, Var};
use super::NumericsError;

/// Boolean attention mask; `true` marks positions a query may attend to.
#[derive(Debug, Clone)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(allowed.len(), rows * cols);
        Self { rows, cols, allowed }
    }

    /// Lower-triangular mask: position `t` sees keys `0..=t`.
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for t in 0..n {
            for u in 0..=t {
                allowed[t * n + u] = true;
            }
        }
        Self {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub(crate) fn flags(&self) -> &[bool] {
        &self.allowed
    }
}

/// Single-head scaled dot-product attention.
///
/// `query: [Tq, d]`, `key: [Tk, d]`, `value: [Tk, dv]` -> `[Tq, dv]`.
/// Masked positions receive exactly zero weight; each unmasked row's weights
/// sum to one.
pub fn attention(
    tape: &mut Tape,
    query: Var,
    key: Var,
    value: Var,
    mask: Option<&AttnMask>,
) -> Result<Var, NumericsError> {
    attention_with_weights(tape, query, key, value, mask).map(|(out, _)| out)
}

/// Like [`attention`] but also returns the weight matrix node, which
/// diagnostics export as attention maps.
pub fn attention_with_weights(
    tape: &mut Tape,
    query: Var,
    key: Var,
    value: Var,
    mask: Option<&AttnMask>,
) -> Result<(Var, Var), NumericsError> {
    let (qs, ks, vs) = (
        tape.shape(query).to_vec(),
        tape.shape(key).to_vec(),
        tape.shape(value).to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(NumericsError::ShapeMismatch {
            op: "attention",
            left: qs,
            right: ks,
        });
    }
    if qs[1] != ks[1] {
        return Err(NumericsError::ShapeMismatch {
            op: "attention query/key feature dims",
            left: qs,
            right: ks,
        });
    }
    if ks[0] != vs[0] {
        return Err(NumericsError::ShapeMismatch {
            op: "attention key/value sequence dims",
            left: ks,
            right: vs,
        });
    }
    if let Some(m) = mask {
        if m.rows() != qs[0] || m.cols() != ks[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "attention mask",
                left: vec![m.rows(), m.cols()],
                right: vec![qs[0], ks[0]],
            });
        }
    }
    let kt = tape.transpose(key);
    let scores = tape.matmul(query, kt);
    let scaled = tape.scale(scores, 1.0 / libm::sqrtf(qs[1] as f32));
    let weights = tape.softmax_rows(scaled, mask.map(|m| m.flags().to_vec()));
    let out = tape.matmul(weights, value);
    Ok((out, weights))
}

/// Projection weights for one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct MhaWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Multi-head attention: queries from `query_src`, keys/values from
/// `kv_src` (equal to `query_src` for self-attention). Returns the output
/// plus one weight-matrix node per head for diagnostics.
pub fn multi_head_attention(
    tape: &mut Tape,
    query_src: Var,
    kv_src: Var,
    weights: MhaWeights,
    heads: usize,
    mask: Option<&AttnMask>,
) -> Result<(Var, Vec<Var>), NumericsError> {
    let width = tape.shape(query_src)[1];
    if heads == 0 || width % heads != 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "multi_head_attention head split",
            left: vec![width],
            right: vec![heads],
        });
    }
    let head_dim = width / heads;
    let q = tape.matmul(query_src, weights.wq);
    let k = tape.matmul(kv_src, weights.wk);
    let v = tape.matmul(kv_src, weights.wv);
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim);
        let kh = tape.slice_cols(k, h * head_dim, head_dim);
        let vh = tape.slice_cols(v, h * head_dim, head_dim);
        let (oh, wh) = attention_with_weights(tape, qh, kh, vh, mask)?;
        outs.push(oh);
        maps.push(wh);
    }
    let merged = tape.concat_cols(&outs);
    Ok((tape.matmul(merged, weights.wo), maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn single_position_returns_value_exactly() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::from_rows(1, 2, vec![0.3, -0.7]), true);
        let k = tape.leaf(Tensor::from_rows(1, 2, vec![1.0, 2.0]), true);
        let v = tape.leaf(Tensor::from_rows(1, 3, vec![5.0, 6.0, 7.0]), true);
        let out = attention(&mut tape, q, k, v, None).unwrap();
        assert_eq!(tape.value(out), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn equal_scores_average_values() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::from_rows(1, 2, vec![1.0, 0.0]), true);
        // Both keys have the same dot product with q.
        let k = tape.leaf(Tensor::from_rows(2, 2, vec![0.5, 9.0, 0.5, -3.0]), true);
        let v = tape.leaf(Tensor::from_rows(2, 2, vec![2.0, 4.0, 6.0, 8.0]), true);
        let out = attention(&mut tape, q, k, v, None).unwrap();
        let got = tape.value(out);
        assert!((got[0] - 4.0).abs() < 1e-6);
        assert!((got[1] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn causal_row_zero_sees_only_first_value() {
        let mut rng = crate::rng::SeedRng::new(5);
        let mut tape = Tape::new();
        let rand = |rng: &mut crate::rng::SeedRng, n: usize| -> Vec<f32> {
            (0..n).map(|_| rng.gaussian()).collect()
        };
        let q = tape.leaf(Tensor::from_rows(3, 4, rand(&mut rng, 12)), true);
        let k = tape.leaf(Tensor::from_rows(3, 4, rand(&mut rng, 12)), true);
        let vdata = rand(&mut rng, 12);
        let v = tape.leaf(Tensor::from_rows(3, 4, vdata.clone()), true);
        let mask = AttnMask::causal(3);
        let out = attention(&mut tape, q, k, v, Some(&mask)).unwrap();
        let got = tape.value(out);
        for j in 0..4 {
            assert!((got[j] - vdata[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn rows_are_convex_combinations() {
        let mut rng = crate::rng::SeedRng::new(17);
        let mut tape = Tape::new();
        let data = |rng: &mut crate::rng::SeedRng, n: usize| -> Vec<f32> {
            (0..n).map(|_| rng.gaussian()).collect()
        };
        let q = tape.leaf(Tensor::from_rows(5, 3, data(&mut rng, 15)), true);
        let k = tape.leaf(Tensor::from_rows(6, 3, data(&mut rng, 18)), true);
        let v = tape.leaf(Tensor::from_rows(6, 2, data(&mut rng, 12)), true);
        let (_, weights) = attention_with_weights(&mut tape, q, k, v, None).unwrap();
        let w = tape.value(weights);
        for r in 0..5 {
            let row = &w[r * 6..(r + 1) * 6];
            assert!(row.iter().all(|&x| x >= 0.0));
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_feature_dims_error() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::from_rows(1, 2, vec![0.0; 2]), true);
        let k = tape.leaf(Tensor::from_rows(1, 3, vec![0.0; 3]), true);
        let v = tape.leaf(Tensor::from_rows(1, 3, vec![0.0; 3]), true);
        assert!(attention(&mut tape, q, k, v, None).is_err());
    }
}
