//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever evaluates the loss value (under `no_grad`), so
//! it is independent of every backward rule it checks.

use crate::error::Result;
use crate::tensor::{backward, no_grad, Param, Tensor};

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Scalar entries compared.
    pub checked: usize,
    pub max_rel_err: f64,
    /// "param[index]" of the worst entry.
    pub worst: String,
}

/// Compare every entry of every parameter's analytic gradient against central
/// finite differences of `loss_fn` with step `h`. Relative error uses a small
/// absolute floor so dead entries (both sides ≈ 0) compare clean.
pub fn check_params(
    params: &[(String, &Param)],
    loss_fn: impl Fn() -> Result<Tensor>,
    h: f64,
    _tol: f64,
) -> Result<GradReport> {
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = loss_fn()?;
    backward(&loss)?;

    let mut checked = 0usize;
    let mut max_rel_err = 0.0f64;
    let mut worst = String::new();

    for (name, p) in params {
        let analytic = p.grad();
        let base = p.value();
        for i in 0..base.len() {
            let mut bumped = base.clone();
            bumped[i] = base[i] + h;
            p.set_value(bumped)?;
            let up = no_grad(&loss_fn)?.item();

            let mut bumped = base.clone();
            bumped[i] = base[i] - h;
            p.set_value(bumped)?;
            let down = no_grad(&loss_fn)?.item();

            let fd = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            let rel = (analytic[i] - fd).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{name}[{i}] analytic={} fd={fd}", analytic[i]);
            }
            checked += 1;
        }
        p.set_value(base)?;
    }
    Ok(GradReport { checked, max_rel_err, worst })
}
