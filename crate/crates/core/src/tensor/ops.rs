//! Differentiable tensor operations.
//!
//! Each op computes its value eagerly and, when an operand is on the tape,
//! registers a backward rule. Backward closures capture shared handles to the
//! operand data they need; operand buffers are immutable after creation so
//! this is safe and allocation-free on the forward path.

use std::rc::Rc;

use super::{BackwardFn, Tensor};
use crate::error::{Error, Result};
use crate::tensor::autograd::Node;

// ── raw kernels ──────────────────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n], cache-friendly i-k-j order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// C[m×n] = A[m×k] · B[n×k]ᵀ (rows of both operands are contiguous).
pub(crate) fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C[k×n] = A[m×k]ᵀ · B[m×n].
pub(crate) fn matmul_at_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
    c
}

fn rank2(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::dim(format!("{op}: expected rank-2 tensor, got shape {other:?}"))),
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ── op construction helpers ──────────────────────────────────────────

fn unary_op(
    x: &Tensor,
    shape: Vec<usize>,
    data: Vec<f64>,
    back: impl Fn(&[f64], &mut [f64]) + 'static,
) -> Tensor {
    match x.node() {
        Some(n) => Tensor::from_op(
            shape,
            data,
            vec![Rc::clone(n)],
            Box::new(move |g, bufs| back(g, &mut bufs[0])),
        ),
        None => Tensor { shape, data: Rc::new(data), node: None },
    }
}

fn binary_op(
    a: &Tensor,
    b: &Tensor,
    shape: Vec<usize>,
    data: Vec<f64>,
    back_a: impl Fn(&[f64], &mut [f64]) + 'static,
    back_b: impl Fn(&[f64], &mut [f64]) + 'static,
) -> Tensor {
    let a_node = a.node().cloned();
    let b_node = b.node().cloned();
    if a_node.is_none() && b_node.is_none() {
        return Tensor { shape, data: Rc::new(data), node: None };
    }
    let a_rec = a_node.is_some();
    let parents: Vec<Rc<Node>> = [a_node, b_node].into_iter().flatten().collect();
    let back: BackwardFn = Box::new(move |g, bufs| {
        let mut slot = 0;
        if a_rec {
            back_a(g, &mut bufs[slot]);
            slot += 1;
        }
        if slot < bufs.len() {
            back_b(g, &mut bufs[slot]);
        }
    });
    Tensor::from_op(shape, data, parents, back)
}

// ── core linear algebra ──────────────────────────────────────────────

/// Standard matrix product with gradients dA = dC·Bᵀ, dB = Aᵀ·dC.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = rank2("matmul", a)?;
    let (k2, n) = rank2("matmul", b)?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul: inner dimensions differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = matmul_raw(a.data(), b.data(), m, k, n);
    let (ad, bd) = (a.data_rc(), b.data_rc());
    Ok(binary_op(
        a,
        b,
        vec![m, n],
        out,
        move |g, da| {
            // dA[i,p] += Σ_j g[i,j]·B[p,j]
            let contrib = matmul_bt_raw(g, &bd, m, n, k);
            da.iter_mut().zip(&contrib).for_each(|(x, y)| *x += y);
        },
        move |g, db| {
            // dB[p,j] += Σ_i A[i,p]·g[i,j]
            let contrib = matmul_at_raw(&ad, g, m, k, n);
            db.iter_mut().zip(&contrib).for_each(|(x, y)| *x += y);
        },
    ))
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (m, n) = rank2("transpose", x)?;
    let xd = x.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = xd[i * n + j];
        }
    }
    Ok(unary_op(x, vec![n, m], out, move |g, dx| {
        for i in 0..m {
            for j in 0..n {
                dx[i * n + j] += g[j * m + i];
            }
        }
    }))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let pass = |g: &[f64], d: &mut [f64]| d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
    Ok(binary_op(a, b, a.shape().to_vec(), data, pass, pass))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(binary_op(
        a,
        b,
        a.shape().to_vec(),
        data,
        |g, da| da.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        |g, db| db.iter_mut().zip(g).for_each(|(x, y)| *x -= y),
    ))
}

/// Elementwise product.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("hadamard", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (ad, bd) = (a.data_rc(), b.data_rc());
    Ok(binary_op(
        a,
        b,
        a.shape().to_vec(),
        data,
        move |g, da| da.iter_mut().zip(g.iter().zip(bd.iter())).for_each(|(x, (gi, bi))| *x += gi * bi),
        move |g, db| db.iter_mut().zip(g.iter().zip(ad.iter())).for_each(|(x, (gi, ai))| *x += gi * ai),
    ))
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let data = x.data().iter().map(|v| v * c).collect();
    unary_op(x, x.shape().to_vec(), data, move |g, dx| {
        dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * c)
    })
}

pub fn neg(x: &Tensor) -> Tensor {
    scale(x, -1.0)
}

// ── activations ──────────────────────────────────────────────────────

/// relu(x) = max(x, 0); subgradient 0 at exactly 0.
pub fn relu(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let xd = x.data_rc();
    unary_op(x, x.shape().to_vec(), data, move |g, dx| {
        for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xd.iter()) {
            if *xi > 0.0 {
                *d += gi;
            }
        }
    })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    let yd = Rc::new(data.clone());
    unary_op(x, x.shape().to_vec(), data, move |g, dx| {
        for ((d, gi), yi) in dx.iter_mut().zip(g).zip(yd.iter()) {
            *d += gi * yi * (1.0 - yi);
        }
    })
}

// ── row-wise normalizers ─────────────────────────────────────────────

/// Row-wise softmax, stabilized by row-max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = rank2("softmax_rows", x)?;
    let xd = x.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &xd[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        orow.iter_mut().for_each(|o| *o /= sum);
    }
    let yd = Rc::new(out.clone());
    Ok(unary_op(x, vec![m, n], out, move |g, dx| {
        // dx = y ⊙ (g − Σ_j g_j·y_j) per row
        for i in 0..m {
            let y = &yd[i * n..(i + 1) * n];
            let gr = &g[i * n..(i + 1) * n];
            let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
            let dr = &mut dx[i * n..(i + 1) * n];
            for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(y) {
                *d += yi * (gi - dot);
            }
        }
    }))
}

/// Row-wise log-softmax; numerically stable log of [`softmax_rows`].
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = rank2("log_softmax_rows", x)?;
    let xd = x.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &xd[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    let yd = Rc::new(out.clone());
    Ok(unary_op(x, vec![m, n], out, move |g, dx| {
        // dx = g − softmax ⊙ rowsum(g)
        for i in 0..m {
            let y = &yd[i * n..(i + 1) * n];
            let gr = &g[i * n..(i + 1) * n];
            let gsum: f64 = gr.iter().sum();
            let dr = &mut dx[i * n..(i + 1) * n];
            for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(y) {
                *d += gi - yi.exp() * gsum;
            }
        }
    }))
}

/// Per-vector normalization over the last axis with learned affine.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("layer_norm: rank-0 input".to_string()))?;
    if d == 0 {
        return Err(Error::dim("layer_norm: last dimension is 0".to_string()));
    }
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::dim(format!(
            "layer_norm: gain {:?} / bias {:?} must be [{d}]",
            gain.shape(),
            bias.shape()
        )));
    }
    let rows = x.numel() / d;
    let xd = x.data();
    let (gd, bd) = (gain.data(), bias.data());
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_sigma = vec![0.0; rows];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_sigma[r] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gd[j] + bd[j];
        }
    }
    let xhat = Rc::new(xhat);
    let inv_sigma = Rc::new(inv_sigma);
    let gain_data = gain.data_rc();

    let x_node = x.node().cloned();
    let g_node = gain.node().cloned();
    let b_node = bias.node().cloned();
    if x_node.is_none() && g_node.is_none() && b_node.is_none() {
        return Ok(Tensor { shape: x.shape().to_vec(), data: Rc::new(out), node: None });
    }
    let flags = [x_node.is_some(), g_node.is_some(), b_node.is_some()];
    let parents: Vec<Rc<Node>> = [x_node, g_node, b_node].into_iter().flatten().collect();
    let back: BackwardFn = Box::new(move |g, bufs| {
        let mut slot = 0;
        if flags[0] {
            let dx = &mut bufs[slot];
            for r in 0..rows {
                let h = &xhat[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..d {
                    let dh = gr[j] * gain_data[j];
                    m1 += dh;
                    m2 += dh * h[j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                let inv = inv_sigma[r];
                for j in 0..d {
                    let dh = gr[j] * gain_data[j];
                    dx[r * d + j] += (dh - m1 - h[j] * m2) * inv;
                }
            }
            slot += 1;
        }
        if flags[1] {
            let dg = &mut bufs[slot];
            for r in 0..rows {
                for j in 0..d {
                    dg[j] += g[r * d + j] * xhat[r * d + j];
                }
            }
            slot += 1;
        }
        if flags[2] {
            let db = &mut bufs[slot];
            for r in 0..rows {
                for j in 0..d {
                    db[j] += g[r * d + j];
                }
            }
        }
    });
    Ok(Tensor::from_op(x.shape().to_vec(), out, parents, back))
}

// ── reductions and indexing ──────────────────────────────────────────

pub fn sum_all(x: &Tensor) -> Tensor {
    let s = x.data().iter().sum();
    unary_op(x, vec![1], vec![s], |g, dx| {
        dx.iter_mut().for_each(|d| *d += g[0]);
    })
}

pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.numel() as f64;
    scale(&sum_all(x), 1.0 / n)
}

/// out[i] = x[i, idx[i]].
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (m, n) = rank2("gather_rows", x)?;
    if idx.len() != m {
        return Err(Error::dim(format!("gather_rows: {} indices for {m} rows", idx.len())));
    }
    if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
        return Err(Error::dim(format!("gather_rows: column {bad} out of range {n}")));
    }
    let xd = x.data();
    let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| xd[i * n + j]).collect();
    let idx = idx.to_vec();
    Ok(unary_op(x, vec![m], out, move |g, dx| {
        for (i, &j) in idx.iter().enumerate() {
            dx[i * n + j] += g[i];
        }
    }))
}

/// out row i = table row idx[i]; gradient scatter-adds into the table.
pub fn select_rows(table: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (v, d) = rank2("select_rows", table)?;
    if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
        return Err(Error::dim(format!("select_rows: row {bad} out of range {v}")));
    }
    let td = table.data();
    let mut out = vec![0.0; idx.len() * d];
    for (i, &r) in idx.iter().enumerate() {
        out[i * d..(i + 1) * d].copy_from_slice(&td[r * d..(r + 1) * d]);
    }
    let idx = idx.to_vec();
    Ok(unary_op(table, vec![idx.len(), d], out, move |g, dt| {
        for (i, &r) in idx.iter().enumerate() {
            let grow = &g[i * d..(i + 1) * d];
            let trow = &mut dt[r * d..(r + 1) * d];
            trow.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
        }
    }))
}

/// Broadcast-add a length-n vector to every row of an m×n matrix.
pub fn add_row(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = rank2("add_row", x)?;
    if b.shape() != [n] {
        return Err(Error::dim(format!(
            "add_row: bias {:?} must be [{n}]",
            b.shape()
        )));
    }
    let bd = b.data();
    let mut out = x.data().to_vec();
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] += bd[j];
        }
    }
    Ok(binary_op(
        x,
        b,
        vec![m, n],
        out,
        |g, dx| dx.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        move |g, db| {
            for i in 0..m {
                for j in 0..n {
                    db[j] += g[i * n + j];
                }
            }
        },
    ))
}

pub fn slice_rows(x: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    let (m, n) = rank2("slice_rows", x)?;
    if lo > hi || hi > m {
        return Err(Error::dim(format!("slice_rows: [{lo}, {hi}) out of {m} rows")));
    }
    let out = x.data()[lo * n..hi * n].to_vec();
    Ok(unary_op(x, vec![hi - lo, n], out, move |g, dx| {
        dx[lo * n..hi * n].iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }))
}

pub fn slice_cols(x: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    let (m, n) = rank2("slice_cols", x)?;
    if lo > hi || hi > n {
        return Err(Error::dim(format!("slice_cols: [{lo}, {hi}) out of {n} columns")));
    }
    let w = hi - lo;
    let xd = x.data();
    let mut out = vec![0.0; m * w];
    for i in 0..m {
        out[i * w..(i + 1) * w].copy_from_slice(&xd[i * n + lo..i * n + hi]);
    }
    Ok(unary_op(x, vec![m, w], out, move |g, dx| {
        for i in 0..m {
            let grow = &g[i * w..(i + 1) * w];
            dx[i * n + lo..i * n + hi].iter_mut().zip(grow).for_each(|(a, b)| *a += b);
        }
    }))
}

/// Concatenate along the feature axis: all parts share the row count.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::dim("concat_cols: no operands".to_string()));
    }
    let m = rank2("concat_cols", &parts[0])?.0;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pm, pn) = rank2("concat_cols", p)?;
        if pm != m {
            return Err(Error::dim(format!("concat_cols: row counts {m} vs {pm}")));
        }
        widths.push(pn);
    }
    let n: usize = widths.iter().sum();
    let mut out = vec![0.0; m * n];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pd = p.data();
        for i in 0..m {
            out[i * n + off..i * n + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
        }
        off += w;
    }

    // (offset, width) for each recorded part, in parent order.
    let mut spans = Vec::new();
    let mut parents = Vec::new();
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        if let Some(node) = p.node() {
            parents.push(Rc::clone(node));
            spans.push((off, w));
        }
        off += w;
    }
    if parents.is_empty() {
        return Ok(Tensor { shape: vec![m, n], data: Rc::new(out), node: None });
    }
    let back: BackwardFn = Box::new(move |g, bufs| {
        for (buf, &(off, w)) in bufs.iter_mut().zip(&spans) {
            for i in 0..m {
                let grow = &g[i * n + off..i * n + off + w];
                buf[i * w..(i + 1) * w].iter_mut().zip(grow).for_each(|(a, b)| *a += b);
            }
        }
    });
    Ok(Tensor::from_op(vec![m, n], out, parents, back))
}

/// out row (i·k + j) = x row i, for j in 0..k.
pub fn repeat_interleave_rows(x: &Tensor, k: usize) -> Result<Tensor> {
    let (m, n) = rank2("repeat_interleave_rows", x)?;
    let xd = x.data();
    let mut out = vec![0.0; m * k * n];
    for i in 0..m {
        let row = &xd[i * n..(i + 1) * n];
        for j in 0..k {
            out[(i * k + j) * n..(i * k + j + 1) * n].copy_from_slice(row);
        }
    }
    Ok(unary_op(x, vec![m * k, n], out, move |g, dx| {
        for i in 0..m {
            let drow = &mut dx[i * n..(i + 1) * n];
            for j in 0..k {
                let grow = &g[(i * k + j) * n..(i * k + j + 1) * n];
                drow.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
            }
        }
    }))
}

/// Stack `times` copies of x vertically: out row (t·m + i) = x row i.
pub fn tile_rows(x: &Tensor, times: usize) -> Result<Tensor> {
    let (m, n) = rank2("tile_rows", x)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(m * n * times);
    for _ in 0..times {
        out.extend_from_slice(xd);
    }
    Ok(unary_op(x, vec![m * times, n], out, move |g, dx| {
        for t in 0..times {
            let block = &g[t * m * n..(t + 1) * m * n];
            dx.iter_mut().zip(block).for_each(|(a, b)| *a += b);
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, Param};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Naive triple-loop reference, independent of the production kernel.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn rand_vec(rng: &mut StdRng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    /// Central finite differences against the analytic gradient of a scalar
    /// loss built by `f` from one parameter tensor.
    fn fd_check(shape: Vec<usize>, data: Vec<f64>, f: impl Fn(&Tensor) -> Tensor, tol: f64) {
        let p = Param::new(shape.clone(), data.clone()).unwrap();
        let loss = f(&p.tensor());
        backward(&loss).unwrap();
        let analytic = p.grad();
        let h = 1e-6;
        for i in 0..data.len() {
            let mut plus = data.clone();
            plus[i] += h;
            let mut minus = data.clone();
            minus[i] -= h;
            let lp = f(&Tensor::from_vec(shape.clone(), plus).unwrap()).item();
            let lm = f(&Tensor::from_vec(shape.clone(), minus).unwrap()).item();
            let fd = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                ((analytic[i] - fd) / denom).abs() < tol,
                "index {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = Tensor::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = matmul(&eye, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matmul_scalar_case() {
        let a = Tensor::from_rows(vec![vec![2.0]]).unwrap();
        let b = Tensor::from_rows(vec![vec![3.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        let (m, k, n) = (5, 4, 3);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let got = matmul(
            &Tensor::from_vec(vec![m, k], a.clone()).unwrap(),
            &Tensor::from_vec(vec![k, n], b.clone()).unwrap(),
        )
        .unwrap();
        let want = matmul_oracle(&a, &b, m, k, n);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let y = softmax_rows(&Tensor::from_rows(vec![vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let y = softmax_rows(&Tensor::from_rows(vec![vec![1000.0, 0.0]]).unwrap()).unwrap();
        assert!(y.data()[0] > 1.0 - 1e-12 && y.data()[1] < 1e-12);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = Tensor::from_vec(vec![3, 4], rand_vec(&mut rng, 12)).unwrap();
        let y = softmax_rows(&x).unwrap();
        for i in 0..3 {
            let s: f64 = y.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(y.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn relu_and_sigmoid_basics() {
        let x = Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).data(), &[0.5]);
    }

    #[test]
    fn relu_sign_split_identities() {
        let mut rng = StdRng::seed_from_u64(11);
        let x = Tensor::from_vec(vec![4, 5], rand_vec(&mut rng, 20)).unwrap();
        let plus = relu(&x);
        let minus = relu(&neg(&x));
        for ((p, m), v) in plus.data().iter().zip(minus.data()).zip(x.data()) {
            assert_eq!(p - m, *v); // relu(x) − relu(−x) == x exactly
            assert_eq!(p * m, 0.0); // relu(x) ⊙ relu(−x) == 0 exactly
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::from_vec(vec![4], vec![3.0; 4]).unwrap();
        let gain = Tensor::from_vec(vec![4], vec![1.0; 4]).unwrap();
        let bias = Tensor::zeros(vec![4]);
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_two_point_row() {
        let x = Tensor::from_vec(vec![2], vec![1.0, -1.0]).unwrap();
        let gain = Tensor::from_vec(vec![2], vec![1.0; 2]).unwrap();
        let bias = Tensor::zeros(vec![2]);
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-4 && (y.data()[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = StdRng::seed_from_u64(2);
        let d = 16;
        let x = Tensor::from_vec(vec![d], rand_vec(&mut rng, d)).unwrap();
        let gain = Tensor::from_vec(vec![d], vec![1.0; d]).unwrap();
        let bias = Tensor::zeros(vec![d]);
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / d as f64;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_zero_width_is_dimension_error() {
        let x = Tensor::zeros(vec![3, 0]);
        let g = Tensor::zeros(vec![0]);
        let err = layer_norm(&x, &g, &g, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(42);
        let data = rand_vec(&mut rng, 12);
        let w = Tensor::from_vec(vec![4, 2], rand_vec(&mut rng, 8)).unwrap();

        let weights = Tensor::from_vec(vec![3, 4], rand_vec(&mut rng, 12)).unwrap();
        fd_check(vec![3, 4], data.clone(), |x| sum_all(&matmul(x, &w).unwrap()), 1e-6);
        {
            let weights = weights.clone();
            fd_check(
                vec![3, 4],
                data.clone(),
                move |x| sum_all(&hadamard(&softmax_rows(x).unwrap(), &weights).unwrap()),
                1e-5,
            );
        }
        fd_check(
            vec![3, 4],
            data.clone(),
            |x| sum_all(&hadamard(&log_softmax_rows(x).unwrap(), &Tensor::from_vec(vec![3, 4], vec![0.3; 12]).unwrap()).unwrap()),
            1e-5,
        );
        fd_check(vec![3, 4], data.clone(), |x| sum_all(&hadamard(&relu(x), x).unwrap()), 1e-5);
        fd_check(vec![3, 4], data.clone(), |x| sum_all(&sigmoid(x)), 1e-5);
        fd_check(vec![3, 4], data.clone(), |x| sum_all(&transpose(x).unwrap()), 1e-6);
        fd_check(
            vec![3, 4],
            data.clone(),
            |x| {
                let g = Tensor::from_vec(vec![4], vec![1.3, 0.7, -0.4, 2.0]).unwrap();
                let b = Tensor::from_vec(vec![4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
                sum_all(&hadamard(&layer_norm(x, &g, &b, 1e-5).unwrap(), x).unwrap())
            },
            1e-4,
        );
        fd_check(
            vec![3, 4],
            data.clone(),
            |x| sum_all(&gather_rows(&hadamard(x, x).unwrap(), &[1, 3, 0]).unwrap()),
            1e-5,
        );
        fd_check(
            vec![3, 4],
            data.clone(),
            |x| sum_all(&hadamard(&select_rows(x, &[2, 0, 2]).unwrap(), &Tensor::from_vec(vec![3, 4], vec![0.5; 12]).unwrap()).unwrap()),
            1e-5,
        );
        fd_check(
            vec![3, 4],
            data.clone(),
            |x| {
                let parts = [slice_cols(x, 0, 2).unwrap(), slice_cols(x, 2, 4).unwrap()];
                let cat = concat_cols(&parts).unwrap();
                sum_all(&hadamard(&cat, &cat).unwrap())
            },
            1e-5,
        );
        fd_check(
            vec![3, 4],
            data.clone(),
            |x| {
                let r = repeat_interleave_rows(x, 2).unwrap();
                let t = tile_rows(x, 2).unwrap();
                sum_all(&hadamard(&r, &t).unwrap())
            },
            1e-5,
        );
        fd_check(
            vec![3, 4],
            data,
            |x| {
                let b = Tensor::from_vec(vec![4], vec![0.2, -0.1, 0.4, 0.9]).unwrap();
                let y = add_row(&slice_rows(x, 1, 3).unwrap(), &b).unwrap();
                sum_all(&hadamard(&y, &y).unwrap())
            },
            1e-5,
        );
    }

    #[test]
    fn add_row_bias_gradient() {
        let x = Tensor::zeros(vec![3, 2]);
        let b = Param::new(vec![2], vec![0.5, -0.5]).unwrap();
        let y = add_row(&x, &b.tensor()).unwrap();
        backward(&sum_all(&y)).unwrap();
        assert_eq!(b.grad(), vec![3.0, 3.0]);
    }

    #[test]
    fn dynamic_layout_repeat_and_tile() {
        let x = Tensor::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let r = repeat_interleave_rows(&x, 2).unwrap();
        assert_eq!(r.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        let t = tile_rows(&x, 2).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }
}
