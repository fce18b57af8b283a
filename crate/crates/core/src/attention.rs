//! Scaled dot-product multi-head attention, used for the decoder's
//! cross-connection and for the baseline self-attention layers in the
//! ablation harness.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::ops::{add, concat_cols, matmul, scale, slice_cols, softmax_rows, transpose};
use crate::tensor::{Param, Tensor};

/// Additive bias applied to masked logits before softmax; saturates the
/// attention mass below 1e-300 without producing NaN in f64.
pub const MASK_BIAS: f64 = -1e9;

/// Boolean attention mask: `true` means position (i, j) may attend.
#[derive(Debug, Clone)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::dim(format!(
                "mask: {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                allowed.len()
            )));
        }
        Ok(AttnMask { rows, cols, allowed })
    }

    /// Lower-triangular mask: query t attends keys ≤ t.
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allowed[i * n + j] = true;
            }
        }
        AttnMask { rows: n, cols: n, allowed }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn bias_tensor(&self) -> Tensor {
        let data = self.allowed.iter().map(|&a| if a { 0.0 } else { MASK_BIAS }).collect();
        Tensor::from_vec(vec![self.rows, self.cols], data).expect("mask shape")
    }

    fn has_fully_masked_row(&self) -> bool {
        (0..self.rows).any(|i| self.allowed[i * self.cols..(i + 1) * self.cols].iter().all(|&a| !a))
    }
}

/// Softmax(Q·Kᵀ/√dh)·V over one head. Masked positions receive a large
/// negative bias before the softmax.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttnMask>,
) -> Result<Tensor> {
    let (m, dh) = (q.rows(), q.cols());
    let n = k.rows();
    if k.cols() != dh || v.cols() != dh || v.rows() != n {
        return Err(Error::dim(format!(
            "attention: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if let Some(mask) = mask {
        if mask.shape() != (m, n) {
            return Err(Error::dim(format!(
                "attention: mask {:?} must be ({m}, {n})",
                mask.shape()
            )));
        }
        if mask.has_fully_masked_row() {
            return Err(Error::contract(
                "attention: a query row is fully masked; softmax undefined".to_string(),
            ));
        }
    }
    let mut logits = scale(&matmul(q, &transpose(k)?)?, 1.0 / (dh as f64).sqrt());
    if let Some(mask) = mask {
        logits = add(&logits, &mask.bias_tensor())?;
    }
    matmul(&softmax_rows(&logits)?, v)
}

/// The four projection matrices of one attention block.
#[derive(Debug)]
pub struct AttentionParams {
    pub w_q: Param,
    pub w_k: Param,
    pub w_v: Param,
    pub w_out: Param,
    pub n_heads: usize,
}

impl AttentionParams {
    pub fn init(rng: &mut ChaCha12Rng, d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::config(format!(
                "n_heads {n_heads} must divide d_model {d_model}"
            )));
        }
        Ok(AttentionParams {
            w_q: init::uniform_fan_in(rng, d_model, d_model),
            w_k: init::uniform_fan_in(rng, d_model, d_model),
            w_v: init::uniform_fan_in(rng, d_model, d_model),
            w_out: init::uniform_fan_in(rng, d_model, d_model),
            n_heads,
        })
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((format!("{prefix}.w_q"), &self.w_q));
        out.push((format!("{prefix}.w_k"), &self.w_k));
        out.push((format!("{prefix}.w_v"), &self.w_v));
        out.push((format!("{prefix}.w_out"), &self.w_out));
    }
}

/// Project, split along the feature axis, attend per head, concatenate,
/// apply the output projection. Self-attention is the x_q == x_kv case.
pub fn multi_head_attention(
    x_q: &Tensor,
    x_kv: &Tensor,
    params: &AttentionParams,
    mask: Option<&AttnMask>,
) -> Result<Tensor> {
    let d_model = params.w_q.shape()[0];
    if x_q.cols() != d_model || x_kv.cols() != d_model {
        return Err(Error::dim(format!(
            "multi_head_attention: inputs {:?}/{:?} must have width {d_model}",
            x_q.shape(),
            x_kv.shape()
        )));
    }
    let q = matmul(x_q, &params.w_q.tensor())?;
    let k = matmul(x_kv, &params.w_k.tensor())?;
    let v = matmul(x_kv, &params.w_v.tensor())?;
    let dh = d_model / params.n_heads;
    let mut heads = Vec::with_capacity(params.n_heads);
    for h in 0..params.n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        heads.push(scaled_dot_attention(
            &slice_cols(&q, lo, hi)?,
            &slice_cols(&k, lo, hi)?,
            &slice_cols(&v, lo, hi)?,
            mask,
        )?);
    }
    matmul(&concat_cols(&heads)?, &params.w_out.tensor())
}
