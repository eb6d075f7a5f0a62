//! Adam with bias correction, plus the cosine-annealing schedule used by the
//! training loops.

use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-parameter Adam moments. One state drives a fixed list of parameter
/// tensors; `step` increments exactly once per [`AdamState::step`] call.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub base_lr: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    /// Decay rates (0.9, 0.999), epsilon 1e-8.
    pub fn new(base_lr: f32, param_sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            base_lr,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(base_lr: f32, params: &[&Tensor]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        Self::new(base_lr, &sizes)
    }

    /// One bias-corrected Adam update, in place. `grads[i]` must match
    /// `params[i]` elementwise; `lr` overrides nothing persistent (pass the
    /// scheduled rate each call).
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f32]], lr: f32) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "adam: lr must be positive, got {lr}"
            )));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape_mismatch(
                "adam",
                format!("{} parameter tensors", self.m.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.m[i].len() || grads[i].len() != self.m[i].len() {
                return Err(Error::shape_mismatch(
                    "adam",
                    format!("param {i}: {} elements", self.m[i].len()),
                    format!("{} param / {} grad", p.numel(), grads[i].len()),
                ));
            }
            if grads[i].iter().any(|g| !g.is_finite()) {
                return Err(Error::non_finite(format!("adam: gradient of param {i}")));
            }
        }

        self.step += 1;
        let t = self.step as f32;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = p.data_mut();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// base_lr * 0.5 * (1 + cos(pi * step / total)); reaches exactly 0 at the
/// final step.
pub fn cosine_anneal_lr(base_lr: f32, step: usize, total_steps: usize) -> Result<f32> {
    if total_steps < 1 {
        return Err(Error::InvalidArgument(
            "cosine_anneal_lr: total_steps must be >= 1".into(),
        ));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "cosine_anneal_lr: step {step} exceeds total_steps {total_steps}"
        )));
    }
    let progress = step as f32 / total_steps as f32;
    Ok((base_lr * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With fresh moments, the bias-corrected step is lr * sign(g) up to
        // the epsilon term.
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = vec![0.3f32, -0.7];
        let mut state = AdamState::for_params(0.1, &[&p]);
        state.step(&mut [&mut p], &[&g], 0.1).unwrap();
        assert!((p.data()[0] - (1.0 - 0.1)).abs() < 1e-4);
        assert!((p.data()[1] - (-1.0 + 0.1)).abs() < 1e-4);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_grad_keeps_param_with_zero_moments() {
        let mut p = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = vec![0.0f32; 3];
        let mut state = AdamState::for_params(0.1, &[&p]);
        state.step(&mut [&mut p], &[&g], 0.1).unwrap();
        state.step(&mut [&mut p], &[&g], 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(x) = (x-3)^2, grad = 2(x-3); 200 steps at lr 0.1.
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut state = AdamState::for_params(0.1, &[&p]);
        for _ in 0..200 {
            let g = vec![2.0 * (p.data()[0] - 3.0)];
            state.step(&mut [&mut p], &[&g], 0.1).unwrap();
        }
        assert!(
            (p.data()[0] - 3.0).abs() < 1e-2,
            "x = {} after 200 steps",
            p.data()[0]
        );
    }

    #[test]
    fn rejects_mismatched_grads() {
        let mut p = Tensor::new(vec![2], vec![0.0; 2]).unwrap();
        let g = vec![0.0f32; 3];
        let mut state = AdamState::for_params(0.1, &[&p]);
        assert!(state.step(&mut [&mut p], &[&g], 0.1).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_anneal_lr(0.3, 0, 100).unwrap(), 0.3);
        let end = cosine_anneal_lr(0.3, 100, 100).unwrap();
        assert!(end.abs() < 1e-8, "end lr {end}");
        // Half-point of the published 0.0003 schedule.
        let half = cosine_anneal_lr(0.0003, 50, 100).unwrap();
        assert!((half - 0.00015).abs() < 1e-9);
        assert!(cosine_anneal_lr(0.3, 101, 100).is_err());
    }
}
