//! Adaptive-moment optimizer and the warmup/anneal learning-rate policy.

use crate::error::{Error, Result};
use crate::tensor::serialize::TensorRecord;
use crate::tensor::Param;
use crate::training::TrainConfig;

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then
/// `peak_lr × anneal_factor^⌊epoch / anneal_every⌋`. Continuous at the
/// warmup boundary.
pub fn lr_at(step: u64, epoch: usize, cfg: &TrainConfig) -> f64 {
    let warm = (step as f64 / cfg.warmup_steps.max(1) as f64).min(1.0);
    let decay = cfg.anneal_factor.powi((epoch / cfg.anneal_every_epochs.max(1)) as i32);
    cfg.peak_lr * warm * decay
}

/// Adam with bias correction; β₁ = 0.9, β₂ = 0.999, ε = 1e-8 by default.
/// Gradients are clipped to a global norm before the moment update.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps (drives bias correction and the LR warmup).
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(param_sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &[(String, &Param)], cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = params.iter().map(|(_, p)| p.numel()).collect();
        Adam::new(&sizes, cfg.beta1, cfg.beta2, cfg.eps_opt)
    }

    /// One update over the accumulated gradients; zeroes them afterwards.
    pub fn step(&mut self, params: &[(String, &Param)], lr: f64, clip_norm: Option<f64>) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter set");
        let mut scale = 1.0;
        if let Some(max_norm) = clip_norm {
            let norm_sq: f64 = params
                .iter()
                .map(|(_, p)| p.grad().iter().map(|g| g * g).sum::<f64>())
                .sum();
            let norm = norm_sq.sqrt();
            if norm > max_norm && norm > 0.0 {
                scale = max_norm / norm;
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((_, param), (m, v)) in params.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            param.apply_grad(|data, grad| {
                for i in 0..data.len() {
                    let g = grad[i] * scale;
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
            param.zero_grad();
        }
    }

    /// Optimizer state as checkpoint records ("opt.m.*", "opt.v.*",
    /// "opt.step"), parallel to the given parameter names.
    pub fn state_records(&self, params: &[(String, &Param)]) -> Vec<TensorRecord> {
        let mut out = Vec::with_capacity(2 * params.len() + 1);
        out.push(TensorRecord {
            name: "opt.step".to_string(),
            dims: vec![1],
            data: vec![self.t as f64],
        });
        for ((name, _), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            out.push(TensorRecord {
                name: format!("opt.m.{name}"),
                dims: vec![m.len()],
                data: m.clone(),
            });
            out.push(TensorRecord {
                name: format!("opt.v.{name}"),
                dims: vec![v.len()],
                data: v.clone(),
            });
        }
        out
    }

    /// Restore moments and step count from checkpoint records. Missing
    /// optimizer records leave the fresh (zero) state in place.
    pub fn load_state(
        &mut self,
        records: &[TensorRecord],
        params: &[(String, &Param)],
    ) -> Result<()> {
        let by_name: std::collections::HashMap<&str, &TensorRecord> =
            records.iter().map(|r| (r.name.as_str(), r)).collect();
        if let Some(step) = by_name.get("opt.step") {
            self.t = step.data.first().copied().unwrap_or(0.0) as u64;
        }
        for (i, (name, param)) in params.iter().enumerate() {
            for (prefix, slot) in [("opt.m.", &mut self.m[i]), ("opt.v.", &mut self.v[i])] {
                if let Some(rec) = by_name.get(format!("{prefix}{name}").as_str()) {
                    if rec.data.len() != param.numel() {
                        return Err(Error::dim(format!(
                            "optimizer record {prefix}{name}: {} values for {} entries",
                            rec.data.len(),
                            param.numel()
                        )));
                    }
                    slot.copy_from_slice(&rec.data);
                }
            }
        }
        Ok(())
    }
}
