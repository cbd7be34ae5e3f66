//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero-initialized moments shaped after the parameter list.
    pub fn new(learning_rate: f64, params: &[&Tensor]) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update in place; gradients are zeroed after.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::shape(format!(
                "adam: {} params but state tracks {}",
                params.len(),
                self.first_moment.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            match p.grad() {
                None => {
                    return Err(Error::shape(format!("adam: param {i} has no gradient")));
                }
                Some(g) if g.len() != self.first_moment[i].len() => {
                    return Err(Error::shape(format!(
                        "adam: param {i} gradient length {} vs moment length {}",
                        g.len(),
                        self.first_moment[i].len()
                    )));
                }
                Some(_) => {}
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad().unwrap().to_vec();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let data = p.data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
