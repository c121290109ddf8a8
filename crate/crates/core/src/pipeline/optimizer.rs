//! Adaptive-moment optimizer (Adam with the usual decay constants).

use crate::diffcore::Tensor;
use crate::error::{CmcError, Result};

pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        Adam {
            lr: lr as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.m.len()
    }

    /// Total number of scalar parameters being optimized.
    pub fn scalar_count(&self) -> usize {
        self.m.iter().map(Vec::len).sum()
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<f32>>, grads: &[Tensor<f32>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CmcError::Shape {
                op: "adam_step",
                detail: format!(
                    "{} params / {} grads for {} slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for ((param, grad), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if param.numel() != grad.numel() || param.numel() != m.len() {
                return Err(CmcError::Shape {
                    op: "adam_step",
                    detail: format!("{:?} vs grad {:?}", param.shape(), grad.shape()),
                });
            }
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
