//! The expansion layer.
//!
//! A length-T sequence is transformed into a length-L sequence (forward
//! expansion), processed there, and collapsed back to length T (backward
//! expansion). Both directions share one similarity matrix Z, split by sign
//! through ReLU so no information is destroyed, and each half is normalized
//! by Φ — a softmax-free row normalizer — before mixing the value rows. A
//! sigmoid gate blends the two sign paths per output element.
//!
//! Static expansion uses L = N_E learned query/bias vectors independent of
//! the input (bidirectional only; permutation-equivariant). Dynamic expansion
//! uses L = T·N_E vectors conditioned on the input rows and supports causal
//! masking for autoregressive stacks.

use std::rc::Rc;

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::ops::{
    add, hadamard, matmul, neg, relu, scale, sigmoid, sub, transpose,
    repeat_interleave_rows, tile_rows,
};
use crate::tensor::{Param, Tensor};

/// Default Φ stabilizer: negligible against typical attention masses, large
/// enough to keep the normalizer finite in f64.
pub const DEFAULT_EPSILON: f64 = 1e-9;

/// Expansion flavor plus its coefficient N_E.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpansionMode {
    /// L = N_E learned vectors; input-independent; bidirectional only.
    Static { n_e: usize },
    /// L = T·N_E input-conditioned vectors with causal masking.
    DynamicCausal { n_e: usize },
    /// L = T·N_E input-conditioned vectors, mask-free.
    DynamicBidirectional { n_e: usize },
}

impl ExpansionMode {
    pub fn n_e(&self) -> usize {
        match *self {
            ExpansionMode::Static { n_e }
            | ExpansionMode::DynamicCausal { n_e }
            | ExpansionMode::DynamicBidirectional { n_e } => n_e,
        }
    }

    pub fn is_dynamic(&self) -> bool {
        !matches!(self, ExpansionMode::Static { .. })
    }

    pub fn is_causal(&self) -> bool {
        matches!(self, ExpansionMode::DynamicCausal { .. })
    }
}

/// Where a layer sits in the network; restricts which modes are legal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Bidirectional,
    Autoregressive,
}

/// Learned state of one expansion layer: the query/bias vector banks and the
/// 4 (static) or 5 (dynamic) projection matrices.
#[derive(Debug)]
pub struct ExpansionParams {
    pub q_bank: Param,
    pub b_bank: Param,
    /// Conditioning projection; present only in dynamic modes.
    pub w_c: Option<Param>,
    pub w_k: Param,
    pub w_v1: Param,
    pub w_v2: Param,
    pub w_s: Param,
    pub epsilon: f64,
}

impl ExpansionParams {
    pub fn init(rng: &mut ChaCha12Rng, d_model: usize, mode: ExpansionMode) -> Self {
        let n_e = mode.n_e();
        ExpansionParams {
            q_bank: init::normal(rng, vec![n_e, d_model], 0.02),
            b_bank: init::normal(rng, vec![n_e, d_model], 0.02),
            w_c: mode.is_dynamic().then(|| init::uniform_fan_in(rng, d_model, d_model)),
            w_k: init::uniform_fan_in(rng, d_model, d_model),
            w_v1: init::uniform_fan_in(rng, d_model, d_model),
            w_v2: init::uniform_fan_in(rng, d_model, d_model),
            w_s: init::uniform_fan_in(rng, d_model, d_model),
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((format!("{prefix}.q_bank"), &self.q_bank));
        out.push((format!("{prefix}.b_bank"), &self.b_bank));
        if let Some(w_c) = &self.w_c {
            out.push((format!("{prefix}.w_c"), w_c));
        }
        out.push((format!("{prefix}.w_k"), &self.w_k));
        out.push((format!("{prefix}.w_v1"), &self.w_v1));
        out.push((format!("{prefix}.w_v2"), &self.w_v2));
        out.push((format!("{prefix}.w_s"), &self.w_s));
    }
}

/// Φ: out[i][j] = x[i][j] / (Σ_z x[i][z] + ε). Callers pass ReLU outputs, so
/// rows are nonnegative and every output row sums to s/(s+ε) ∈ [0, 1).
pub fn row_normalize(x: &Tensor, epsilon: f64) -> Result<Tensor> {
    let [m, n] = *x.shape() else {
        return Err(Error::dim(format!("row_normalize: expected rank 2, got {:?}", x.shape())));
    };
    if epsilon <= 0.0 {
        return Err(Error::contract(format!("row_normalize: epsilon must be positive, got {epsilon}")));
    }
    debug_assert!(
        x.data().iter().all(|&v| v >= 0.0),
        "row_normalize: negative input entry"
    );
    let xd = x.data();
    let mut out = vec![0.0; m * n];
    let mut denom = vec![0.0; m];
    for i in 0..m {
        let row = &xd[i * n..(i + 1) * n];
        let d = row.iter().sum::<f64>() + epsilon;
        denom[i] = d;
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
            *o = v / d;
        }
    }
    let Some(node) = x.node() else {
        return Tensor::from_vec(vec![m, n], out);
    };
    let y = Rc::new(out.clone());
    let denom = Rc::new(denom);
    Ok(Tensor::from_op(
        vec![m, n],
        out,
        vec![Rc::clone(node)],
        Box::new(move |g, bufs| {
            // dx_ik = (g_ik − Σ_j g_ij·y_ij) / (s_i + ε)
            let dx = &mut bufs[0];
            for i in 0..m {
                let gr = &g[i * n..(i + 1) * n];
                let yr = &y[i * n..(i + 1) * n];
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                let d = denom[i];
                for (o, gi) in dx[i * n..(i + 1) * n].iter_mut().zip(gr) {
                    *o += (gi - dot) / d;
                }
            }
        }),
    ))
}

/// Expanded-row layout is origin-major: row i·N_E + j comes from position i
/// and bank vector j, so origin(r) = r / N_E.
pub fn origin_map(t: usize, n_e: usize) -> Vec<usize> {
    (0..t).flat_map(|i| std::iter::repeat_n(i, n_e)).collect()
}

/// Multiplicative 0/1 mask for ReLU(Z) before Φ: expanded row r (origin i)
/// may attend key t only when t ≤ i.
pub fn causal_forward_mask(t: usize, n_e: usize) -> Tensor {
    let l = t * n_e;
    let mut data = vec![0.0; l * t];
    for (r, &origin) in origin_map(t, n_e).iter().enumerate() {
        for key in 0..=origin {
            data[r * t + key] = 1.0;
        }
    }
    Tensor::from_vec(vec![l, t], data).expect("mask shape")
}

/// Mask for the backward step on Zᵀ: output position t may gather expanded
/// row r only when origin(r) ≤ t.
pub fn causal_gather_mask(t: usize, n_e: usize) -> Tensor {
    let l = t * n_e;
    let mut data = vec![0.0; t * l];
    for (r, &origin) in origin_map(t, n_e).iter().enumerate() {
        for pos in origin..t {
            data[pos * l + r] = 1.0;
        }
    }
    Tensor::from_vec(vec![t, l], data).expect("mask shape")
}

/// Static generation: the banks are the expansion vectors, verbatim.
pub fn build_static_expansion(params: &ExpansionParams, mode: ExpansionMode) -> Result<(Tensor, Tensor)> {
    if mode.is_dynamic() {
        return Err(Error::contract(
            "build_static_expansion called in dynamic mode".to_string(),
        ));
    }
    Ok((params.q_bank.tensor(), params.b_bank.tensor()))
}

/// Dynamic generation: row i·N_E + j of E_Q is c_i + q_j (same for E_B with
/// the bias bank). Returns the origin map used for causal masking.
pub fn build_dynamic_expansion(
    c: &Tensor,
    params: &ExpansionParams,
) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let t = c.rows();
    let n_e = params.q_bank.shape()[0];
    let e_q = add(
        &repeat_interleave_rows(c, n_e)?,
        &tile_rows(&params.q_bank.tensor(), t)?,
    )?;
    let e_b = add(
        &repeat_interleave_rows(c, n_e)?,
        &tile_rows(&params.b_bank.tensor(), t)?,
    )?;
    Ok((e_q, e_b, origin_map(t, n_e)))
}

/// Forward expansion: Z = E_Q·Kᵀ/√d, sign-split through ReLU, masked entries
/// zeroed before Φ, then F_i = Φ(·)·V_i + E_B. Z is returned for reuse by the
/// backward step.
pub fn forward_expansion(
    e_q: &Tensor,
    k: &Tensor,
    v1: &Tensor,
    v2: &Tensor,
    e_b: &Tensor,
    mask: Option<&Tensor>,
    epsilon: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let t = k.rows();
    let l = e_q.rows();
    let d = e_q.cols();
    if v1.shape() != k.shape() || v2.shape() != k.shape() {
        return Err(Error::dim(format!(
            "forward_expansion: K {:?}, V1 {:?}, V2 {:?} must share shape",
            k.shape(),
            v1.shape(),
            v2.shape()
        )));
    }
    if e_b.shape() != e_q.shape() {
        return Err(Error::dim(format!(
            "forward_expansion: E_Q {:?} vs E_B {:?}",
            e_q.shape(),
            e_b.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != [l, t] {
            return Err(Error::dim(format!(
                "forward_expansion: mask {:?} must be [{l}, {t}]",
                m.shape()
            )));
        }
    }
    let z = scale(&matmul(e_q, &transpose(k)?)?, 1.0 / (d as f64).sqrt());
    let mut a1 = relu(&z);
    let mut a2 = relu(&neg(&z));
    if let Some(m) = mask {
        a1 = hadamard(&a1, m)?;
        a2 = hadamard(&a2, m)?;
    }
    let r1 = row_normalize(&a1, epsilon)?;
    let r2 = row_normalize(&a2, epsilon)?;
    let f1 = add(&matmul(&r1, v1)?, e_b)?;
    let f2 = add(&matmul(&r2, v2)?, e_b)?;
    Ok((f1, f2, z))
}

/// Backward expansion: the transposed similarity matrix retrieves the
/// original length, with the gather-side mask applied the same way (zeroed
/// after ReLU, before Φ).
pub fn backward_expansion(
    z: &Tensor,
    f1: &Tensor,
    f2: &Tensor,
    mask: Option<&Tensor>,
    epsilon: f64,
) -> Result<(Tensor, Tensor)> {
    let l = z.rows();
    let t = z.cols();
    if f1.rows() != l || f2.rows() != l {
        return Err(Error::dim(format!(
            "backward_expansion: Z has {l} rows but F1/F2 have {}/{}",
            f1.rows(),
            f2.rows()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != [t, l] {
            return Err(Error::dim(format!(
                "backward_expansion: mask {:?} must be [{t}, {l}]",
                m.shape()
            )));
        }
    }
    let zt = transpose(z)?;
    let mut a1 = relu(&zt);
    let mut a2 = relu(&neg(&zt));
    if let Some(m) = mask {
        a1 = hadamard(&a1, m)?;
        a2 = hadamard(&a2, m)?;
    }
    let r1 = row_normalize(&a1, epsilon)?;
    let r2 = row_normalize(&a2, epsilon)?;
    Ok((matmul(&r1, f1)?, matmul(&r2, f2)?))
}

/// Sigmoid gate over the two sign paths: out = σ(S)⊙B1 + (1−σ(S))⊙B2,
/// computed as B2 + σ(S)⊙(B1−B2) so B1 == B2 returns B1 exactly.
pub fn select(s: &Tensor, b1: &Tensor, b2: &Tensor) -> Result<Tensor> {
    if s.shape() != b1.shape() || b1.shape() != b2.shape() {
        return Err(Error::dim(format!(
            "select: S {:?}, B1 {:?}, B2 {:?} must share shape",
            s.shape(),
            b1.shape(),
            b2.shape()
        )));
    }
    let gate = sigmoid(s);
    add(b2, &hadamard(&gate, &sub(b1, b2)?)?)
}

/// One reusable expansion layer: projections, vector generation per mode,
/// forward → backward → selection. Output length equals input length.
#[derive(Debug)]
pub struct ExpansionLayer {
    pub mode: ExpansionMode,
    pub params: ExpansionParams,
}

impl ExpansionLayer {
    pub fn new(
        rng: &mut ChaCha12Rng,
        d_model: usize,
        mode: ExpansionMode,
        placement: Placement,
    ) -> Result<Self> {
        if mode.n_e() == 0 {
            return Err(Error::config("expansion coefficient N_E must be positive".to_string()));
        }
        match placement {
            Placement::Autoregressive if !mode.is_causal() => {
                return Err(Error::config(format!(
                    "{mode:?} violates the autoregression condition; decoder expansion must be DynamicCausal"
                )));
            }
            Placement::Bidirectional if mode.is_causal() => {
                return Err(Error::config(
                    "DynamicCausal expansion is for autoregressive placement".to_string(),
                ));
            }
            _ => {}
        }
        Ok(ExpansionLayer { mode, params: ExpansionParams::init(rng, d_model, mode) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.rows();
        let eps = self.params.epsilon;
        let k = matmul(x, &self.params.w_k.tensor())?;
        let v1 = matmul(x, &self.params.w_v1.tensor())?;
        let v2 = matmul(x, &self.params.w_v2.tensor())?;
        let s = matmul(x, &self.params.w_s.tensor())?;

        let (e_q, e_b, fwd_mask, gather_mask) = match self.mode {
            ExpansionMode::Static { .. } => {
                let (e_q, e_b) = build_static_expansion(&self.params, self.mode)?;
                (e_q, e_b, None, None)
            }
            ExpansionMode::DynamicBidirectional { .. } => {
                let w_c = self.params.w_c.as_ref().expect("dynamic mode carries W_C");
                let c = matmul(x, &w_c.tensor())?;
                let (e_q, e_b, _) = build_dynamic_expansion(&c, &self.params)?;
                (e_q, e_b, None, None)
            }
            ExpansionMode::DynamicCausal { n_e } => {
                let w_c = self.params.w_c.as_ref().expect("dynamic mode carries W_C");
                let c = matmul(x, &w_c.tensor())?;
                let (e_q, e_b, _) = build_dynamic_expansion(&c, &self.params)?;
                (e_q, e_b, Some(causal_forward_mask(t, n_e)), Some(causal_gather_mask(t, n_e)))
            }
        };

        let (f1, f2, z) = forward_expansion(&e_q, &k, &v1, &v2, &e_b, fwd_mask.as_ref(), eps)?;
        let (b1, b2) = backward_expansion(&z, &f1, &f2, gather_mask.as_ref(), eps)?;
        select(&s, &b1, &b2)
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.params.named(prefix, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::tensor::ops::sum_all;
    use crate::tensor::{backward, Param};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn rand_tensor(rng: &mut ChaCha12Rng, m: usize, n: usize) -> Tensor {
        let data = (0..m * n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::from_vec(vec![m, n], data).unwrap()
    }

    // ── Φ ────────────────────────────────────────────────────────────

    #[test]
    fn phi_zero_row_stays_zero() {
        let x = Tensor::from_rows(vec![vec![0.0, 0.0, 0.0]]).unwrap();
        let y = row_normalize(&x, 1e-9).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn phi_symmetric_row() {
        let x = Tensor::from_rows(vec![vec![2.0, 2.0]]).unwrap();
        let y = row_normalize(&x, 1e-9).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-9);
        assert!((y.data()[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn phi_row_sums() {
        let mut r = rng(5);
        let eps = 1e-9;
        let data: Vec<f64> = (0..24).map(|_| r.gen_range(0.0..3.0)).collect();
        let x = Tensor::from_vec(vec![4, 6], data.clone()).unwrap();
        let y = row_normalize(&x, eps).unwrap();
        for i in 0..4 {
            let s: f64 = data[i * 6..(i + 1) * 6].iter().sum();
            let got: f64 = y.row(i).iter().sum();
            assert!((got - s / (s + eps)).abs() < 1e-12);
            assert!(got < 1.0);
            assert!(y.row(i).iter().all(|&v| (0.0..1.0).contains(&v)));
        }
    }

    #[test]
    fn phi_gradient_matches_finite_differences() {
        let mut r = rng(6);
        let data: Vec<f64> = (0..12).map(|_| r.gen_range(0.1..2.0)).collect();
        let p = Param::new(vec![3, 4], data.clone()).unwrap();
        let w = rand_tensor(&mut r, 3, 4);
        let loss_fn = || {
            let y = row_normalize(&p.tensor(), 1e-9)?;
            Ok(sum_all(&crate::tensor::ops::hadamard(&y, &w)?))
        };
        let report = check_params(&[("x".to_string(), &p)], loss_fn, 1e-6, 1e-6).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    // ── vector generation ────────────────────────────────────────────

    #[test]
    fn static_generation_returns_banks_verbatim() {
        let mut r = rng(7);
        let mode = ExpansionMode::Static { n_e: 1 };
        let params = ExpansionParams::init(&mut r, 6, mode);
        let (e_q, e_b) = build_static_expansion(&params, mode).unwrap();
        assert_eq!(e_q.shape(), &[1, 6]);
        assert_eq!(e_q.data(), params.q_bank.value().as_slice());
        assert_eq!(e_b.data(), params.b_bank.value().as_slice());
    }

    #[test]
    fn static_generation_rejected_in_dynamic_mode() {
        let mut r = rng(8);
        let mode = ExpansionMode::DynamicCausal { n_e: 2 };
        let params = ExpansionParams::init(&mut r, 4, mode);
        assert!(matches!(
            build_static_expansion(&params, mode).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn dynamic_generation_with_zero_bank_repeats_conditioning() {
        let mut r = rng(9);
        let mode = ExpansionMode::DynamicBidirectional { n_e: 3 };
        let mut params = ExpansionParams::init(&mut r, 4, mode);
        params.q_bank = Param::new(vec![3, 4], vec![0.0; 12]).unwrap();
        let c = rand_tensor(&mut r, 2, 4);
        let (e_q, _, origin) = build_dynamic_expansion(&c, &params).unwrap();
        assert_eq!(e_q.shape(), &[6, 4]);
        assert_eq!(origin, vec![0, 0, 0, 1, 1, 1]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(e_q.row(i * 3 + j), c.row(i));
            }
        }
    }

    #[test]
    fn dynamic_generation_layout() {
        // T=3, N_E=2: row 4 = c_2 + q_0 under the (i·N_E + j) layout.
        let mut r = rng(10);
        let mode = ExpansionMode::DynamicBidirectional { n_e: 2 };
        let params = ExpansionParams::init(&mut r, 4, mode);
        let c = rand_tensor(&mut r, 3, 4);
        let (e_q, e_b, origin) = build_dynamic_expansion(&c, &params).unwrap();
        assert_eq!(origin, vec![0, 0, 1, 1, 2, 2]);
        let q = params.q_bank.value();
        let b = params.b_bank.value();
        for (row, want_origin, bank) in [(4usize, 2usize, 0usize), (5, 2, 1), (1, 0, 1)] {
            assert_eq!(origin[row], want_origin);
            for col in 0..4 {
                let expect_q = c.row(want_origin)[col] + q[bank * 4 + col];
                let expect_b = c.row(want_origin)[col] + b[bank * 4 + col];
                assert!((e_q.row(row)[col] - expect_q).abs() < 1e-15);
                assert!((e_b.row(row)[col] - expect_b).abs() < 1e-15);
            }
        }

        // T=1, N_E=1 degenerates to a single row c_0 + q_0.
        let c1 = rand_tensor(&mut r, 1, 4);
        let mode1 = ExpansionMode::DynamicBidirectional { n_e: 1 };
        let params1 = ExpansionParams::init(&mut r, 4, mode1);
        let (e_q1, _, origin1) = build_dynamic_expansion(&c1, &params1).unwrap();
        assert_eq!(e_q1.shape(), &[1, 4]);
        assert_eq!(origin1, vec![0]);
        let q1 = params1.q_bank.value();
        for col in 0..4 {
            assert!((e_q1.row(0)[col] - (c1.row(0)[col] + q1[col])).abs() < 1e-15);
        }
    }

    // ── forward/backward expansion ───────────────────────────────────

    /// Literal loop transcription of the expansion equations, independent of
    /// the tensor-op implementation.
    #[allow(clippy::too_many_arguments)]
    fn expansion_oracle(
        e_q: &[Vec<f64>],
        k: &[Vec<f64>],
        v1: &[Vec<f64>],
        v2: &[Vec<f64>],
        e_b: &[Vec<f64>],
        s: &[Vec<f64>],
        origin: Option<&[usize]>,
        eps: f64,
    ) -> Vec<Vec<f64>> {
        let l = e_q.len();
        let t = k.len();
        let d = k[0].len();
        let scale = 1.0 / (d as f64).sqrt();
        let mut z = vec![vec![0.0; t]; l];
        for r in 0..l {
            for key in 0..t {
                z[r][key] = e_q[r].iter().zip(&k[key]).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
        }
        let fwd_allowed = |r: usize, key: usize| origin.map_or(true, |o| key <= o[r]);
        let bwd_allowed = |pos: usize, r: usize| origin.map_or(true, |o| o[r] <= pos);

        let mut f1 = vec![vec![0.0; d]; l];
        let mut f2 = vec![vec![0.0; d]; l];
        for r in 0..l {
            let mut a1 = vec![0.0; t];
            let mut a2 = vec![0.0; t];
            for key in 0..t {
                if fwd_allowed(r, key) {
                    a1[key] = z[r][key].max(0.0);
                    a2[key] = (-z[r][key]).max(0.0);
                }
            }
            let s1: f64 = a1.iter().sum::<f64>() + eps;
            let s2: f64 = a2.iter().sum::<f64>() + eps;
            for c in 0..d {
                let mut acc1 = 0.0;
                let mut acc2 = 0.0;
                for key in 0..t {
                    acc1 += a1[key] / s1 * v1[key][c];
                    acc2 += a2[key] / s2 * v2[key][c];
                }
                f1[r][c] = acc1 + e_b[r][c];
                f2[r][c] = acc2 + e_b[r][c];
            }
        }

        let mut out = vec![vec![0.0; d]; t];
        for pos in 0..t {
            let mut a1 = vec![0.0; l];
            let mut a2 = vec![0.0; l];
            for r in 0..l {
                if bwd_allowed(pos, r) {
                    a1[r] = z[r][pos].max(0.0);
                    a2[r] = (-z[r][pos]).max(0.0);
                }
            }
            let s1: f64 = a1.iter().sum::<f64>() + eps;
            let s2: f64 = a2.iter().sum::<f64>() + eps;
            for c in 0..d {
                let mut b1 = 0.0;
                let mut b2 = 0.0;
                for r in 0..l {
                    b1 += a1[r] / s1 * f1[r][c];
                    b2 += a2[r] / s2 * f2[r][c];
                }
                let gate = 1.0 / (1.0 + (-s[pos][c]).exp());
                out[pos][c] = gate * b1 + (1.0 - gate) * b2;
            }
        }
        out
    }

    fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    #[test]
    fn expansion_pipeline_matches_loop_oracle() {
        let mut r = rng(11);
        let (t, d, n_e) = (4, 6, 2);
        let eps = 1e-9;
        for masked in [false, true] {
            let k = rand_tensor(&mut r, t, d);
            let v1 = rand_tensor(&mut r, t, d);
            let v2 = rand_tensor(&mut r, t, d);
            let s = rand_tensor(&mut r, t, d);
            let c = rand_tensor(&mut r, t, d);
            let q_bank = rand_tensor(&mut r, n_e, d);
            let b_bank = rand_tensor(&mut r, n_e, d);
            let e_q = add(&repeat_interleave_rows(&c, n_e).unwrap(), &tile_rows(&q_bank, t).unwrap()).unwrap();
            let e_b = add(&repeat_interleave_rows(&c, n_e).unwrap(), &tile_rows(&b_bank, t).unwrap()).unwrap();
            let origin = origin_map(t, n_e);

            let (fwd_mask, gather_mask) = if masked {
                (Some(causal_forward_mask(t, n_e)), Some(causal_gather_mask(t, n_e)))
            } else {
                (None, None)
            };
            let (f1, f2, z) =
                forward_expansion(&e_q, &k, &v1, &v2, &e_b, fwd_mask.as_ref(), eps).unwrap();
            let (b1, b2) = backward_expansion(&z, &f1, &f2, gather_mask.as_ref(), eps).unwrap();
            let got = select(&s, &b1, &b2).unwrap();

            let want = expansion_oracle(
                &to_rows(&e_q),
                &to_rows(&k),
                &to_rows(&v1),
                &to_rows(&v2),
                &to_rows(&e_b),
                &to_rows(&s),
                masked.then_some(origin.as_slice()),
                eps,
            );
            for pos in 0..t {
                for col in 0..d {
                    assert!(
                        (got.row(pos)[col] - want[pos][col]).abs() < 1e-12,
                        "masked={masked} pos={pos} col={col}"
                    );
                }
            }
        }
    }

    #[test]
    fn fully_masked_forward_row_returns_bias_exactly() {
        let mut r = rng(12);
        let (t, d) = (3, 4);
        let k = rand_tensor(&mut r, t, d);
        let v1 = rand_tensor(&mut r, t, d);
        let v2 = rand_tensor(&mut r, t, d);
        let e_q = rand_tensor(&mut r, 2, d);
        let e_b = rand_tensor(&mut r, 2, d);
        // Row 0 fully masked, row 1 open.
        let mask = Tensor::from_rows(vec![vec![0.0; t], vec![1.0; t]]).unwrap();
        let (f1, f2, _) = forward_expansion(&e_q, &k, &v1, &v2, &e_b, Some(&mask), 1e-9).unwrap();
        assert_eq!(f1.row(0), e_b.row(0));
        assert_eq!(f2.row(0), e_b.row(0));
        assert_ne!(f1.row(1), e_b.row(1));
    }

    #[test]
    fn scalar_case_splits_by_sign() {
        // T=1, L=1, z>0: F1 = (z/(z+ε))·v1 + e_B, F2 = e_B.
        let eps = 1e-9;
        let e_q = Tensor::from_rows(vec![vec![2.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(vec![vec![1.0, 0.0]]).unwrap();
        let v1 = Tensor::from_rows(vec![vec![3.0, -1.0]]).unwrap();
        let v2 = Tensor::from_rows(vec![vec![5.0, 7.0]]).unwrap();
        let e_b = Tensor::from_rows(vec![vec![0.5, 0.25]]).unwrap();
        let z_val = 2.0 / (2.0f64).sqrt();
        let (f1, f2, z) = forward_expansion(&e_q, &k, &v1, &v2, &e_b, None, eps).unwrap();
        assert!((z.item() - z_val).abs() < 1e-15);
        let w = z_val / (z_val + eps);
        assert!((f1.row(0)[0] - (w * 3.0 + 0.5)).abs() < 1e-12);
        assert!((f1.row(0)[1] - (w * -1.0 + 0.25)).abs() < 1e-12);
        assert_eq!(f2.row(0), e_b.row(0)); // relu(−z) is exactly zero

        // Backward over the same Z: B1 = (z/(z+ε))·F1.
        let (b1, b2) = backward_expansion(&z, &f1, &f2, None, eps).unwrap();
        for c in 0..2 {
            assert!((b1.row(0)[c] - w * f1.row(0)[c]).abs() < 1e-12);
            assert_eq!(b2.row(0)[c], 0.0);
        }
    }

    #[test]
    fn fully_masked_gather_position_is_zero() {
        let mut r = rng(13);
        let (l, t, d) = (4, 2, 3);
        let z = rand_tensor(&mut r, l, t);
        let f1 = rand_tensor(&mut r, l, d);
        let f2 = rand_tensor(&mut r, l, d);
        let mut mask = vec![1.0; t * l];
        mask[..l].iter_mut().for_each(|m| *m = 0.0); // position 0 gathers nothing
        let mask = Tensor::from_vec(vec![t, l], mask).unwrap();
        let (b1, b2) = backward_expansion(&z, &f1, &f2, Some(&mask), 1e-9).unwrap();
        assert!(b1.row(0).iter().all(|&v| v == 0.0));
        assert!(b2.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_restored_across_shape_sweep() {
        let mut r = rng(14);
        let d = 4;
        for t in [1usize, 2, 5] {
            for n_e in [1usize, 3, 8] {
                let e_q = rand_tensor(&mut r, t * n_e, d);
                let e_b = rand_tensor(&mut r, t * n_e, d);
                let k = rand_tensor(&mut r, t, d);
                let (f1, f2, z) =
                    forward_expansion(&e_q, &k, &k, &k, &e_b, None, 1e-9).unwrap();
                let (b1, _) = backward_expansion(&z, &f1, &f2, None, 1e-9).unwrap();
                assert_eq!(b1.shape(), &[t, d]);
            }
        }
    }

    #[test]
    fn backward_expansion_length_mismatch_is_dimension_error() {
        let z = Tensor::zeros(vec![4, 2]);
        let f = Tensor::zeros(vec![3, 5]);
        assert!(matches!(
            backward_expansion(&z, &f, &f, None, 1e-9).unwrap_err(),
            Error::Dimension(_)
        ));
    }

    #[test]
    fn forward_expansion_bad_mask_is_dimension_error() {
        let e = Tensor::zeros(vec![2, 3]);
        let k = Tensor::zeros(vec![2, 3]);
        let mask = Tensor::zeros(vec![3, 3]);
        assert!(matches!(
            forward_expansion(&e, &k, &k, &k, &e, Some(&mask), 1e-9).unwrap_err(),
            Error::Dimension(_)
        ));
    }

    // ── selection ────────────────────────────────────────────────────

    #[test]
    fn select_saturates_to_b1() {
        let s = Tensor::from_vec(vec![1, 3], vec![20.0; 3]).unwrap();
        let b1 = Tensor::from_rows(vec![vec![1.0, 2.0, 3.0]]).unwrap();
        let b2 = Tensor::from_rows(vec![vec![-2.0, 4.0, 0.0]]).unwrap();
        let out = select(&s, &b1, &b2).unwrap();
        for (o, w) in out.data().iter().zip(b1.data()) {
            assert!((o - w).abs() < 1e-8);
        }
    }

    #[test]
    fn select_at_zero_is_midpoint() {
        let s = Tensor::zeros(vec![1, 2]);
        let b1 = Tensor::from_rows(vec![vec![2.0, -4.0]]).unwrap();
        let b2 = Tensor::from_rows(vec![vec![6.0, 8.0]]).unwrap();
        let out = select(&s, &b1, &b2).unwrap();
        assert!((out.data()[0] - 4.0).abs() < 1e-12);
        assert!((out.data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn select_is_exact_when_paths_agree() {
        let mut r = rng(15);
        let s = rand_tensor(&mut r, 3, 4);
        let b = rand_tensor(&mut r, 3, 4);
        let out = select(&s, &b, &b).unwrap();
        assert_eq!(out.data(), b.data());
    }

    #[test]
    fn select_shape_mismatch_is_dimension_error() {
        let s = Tensor::zeros(vec![2, 2]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(select(&s, &b, &b).unwrap_err(), Error::Dimension(_)));
    }

    // ── full layer ───────────────────────────────────────────────────

    #[test]
    fn layer_restores_length_for_every_mode() {
        let mut r = rng(16);
        let d = 8;
        let t = 5;
        for n_e in [1usize, 8, 16, 64] {
            for (mode, placement) in [
                (ExpansionMode::Static { n_e }, Placement::Bidirectional),
                (ExpansionMode::DynamicBidirectional { n_e }, Placement::Bidirectional),
                (ExpansionMode::DynamicCausal { n_e }, Placement::Autoregressive),
            ] {
                let layer = ExpansionLayer::new(&mut r, d, mode, placement).unwrap();
                let x = rand_tensor(&mut r, t, d);
                let y = layer.forward(&x).unwrap();
                assert_eq!(y.shape(), x.shape(), "{mode:?} N_E={n_e}");
            }
        }
    }

    #[test]
    fn static_mode_rejected_for_autoregressive_placement() {
        let mut r = rng(17);
        let err = ExpansionLayer::new(
            &mut r,
            8,
            ExpansionMode::Static { n_e: 4 },
            Placement::Autoregressive,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn causal_layer_is_bit_identical_under_future_perturbation() {
        let mut r = rng(18);
        let d = 8;
        let t = 6;
        let layer = ExpansionLayer::new(
            &mut r,
            d,
            ExpansionMode::DynamicCausal { n_e: 3 },
            Placement::Autoregressive,
        )
        .unwrap();
        let base = rand_tensor(&mut r, t, d);
        for cut in 0..t - 1 {
            let mut perturbed = base.data().to_vec();
            for v in perturbed[(cut + 1) * d..].iter_mut() {
                *v += 0.37;
            }
            let y0 = layer.forward(&base).unwrap();
            let y1 = layer
                .forward(&Tensor::from_vec(vec![t, d], perturbed).unwrap())
                .unwrap();
            for pos in 0..=cut {
                let a: Vec<u64> = y0.row(pos).iter().map(|v| v.to_bits()).collect();
                let b: Vec<u64> = y1.row(pos).iter().map(|v| v.to_bits()).collect();
                assert_eq!(a, b, "cut={cut} pos={pos}");
            }
        }
    }

    #[test]
    fn static_layer_is_permutation_equivariant() {
        let mut r = rng(19);
        let d = 8;
        let t = 5;
        let layer = ExpansionLayer::new(
            &mut r,
            d,
            ExpansionMode::Static { n_e: 4 },
            Placement::Bidirectional,
        )
        .unwrap();
        let x = rand_tensor(&mut r, t, d);
        let perm = [3usize, 0, 4, 2, 1];
        let permuted_rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
        let y = layer.forward(&x).unwrap();
        let y_perm = layer.forward(&Tensor::from_rows(permuted_rows).unwrap()).unwrap();
        for (out_pos, &src) in perm.iter().enumerate() {
            for c in 0..d {
                assert!((y_perm.row(out_pos)[c] - y.row(src)[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut r = rng(20);
        let d = 6;
        for (mode, placement) in [
            (ExpansionMode::Static { n_e: 3 }, Placement::Bidirectional),
            (ExpansionMode::DynamicCausal { n_e: 2 }, Placement::Autoregressive),
        ] {
            let layer = ExpansionLayer::new(&mut r, d, mode, placement).unwrap();
            let x = rand_tensor(&mut r, 4, d);
            let w = rand_tensor(&mut r, 4, d);
            let mut named = Vec::new();
            layer.named("exp", &mut named);
            let loss_fn = || {
                let y = layer.forward(&x)?;
                Ok(sum_all(&crate::tensor::ops::hadamard(&y, &w)?))
            };
            let report = check_params(&named, loss_fn, 1e-5, 1e-4).unwrap();
            assert!(report.max_rel_err < 1e-4, "{mode:?}: {report:?}");
        }
    }

    #[test]
    fn layer_input_gradient_flows() {
        let mut r = rng(21);
        let d = 6;
        let layer = ExpansionLayer::new(
            &mut r,
            d,
            ExpansionMode::Static { n_e: 2 },
            Placement::Bidirectional,
        )
        .unwrap();
        let p = Param::new(vec![3, d], (0..18).map(|i| (i as f64) * 0.1 - 0.9).collect()).unwrap();
        let loss = sum_all(&layer.forward(&p.tensor()).unwrap());
        backward(&loss).unwrap();
        assert!(p.grad().iter().any(|&g| g != 0.0));
    }
}
