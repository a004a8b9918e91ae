use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, NetworkParameters};
use crate::error::{Error, Result};

/// Adam moment estimates for a list of flat parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moments: Vec<Vec<f64>>,
    pub second_moments: Vec<Vec<f64>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    /// Zeroed moments for arrays of the given lengths, β=(0.9, 0.999), ε=1e-8.
    pub fn new(lengths: &[usize], learning_rate: f64) -> Self {
        Self {
            first_moments: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second_moments: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_network(params: &NetworkParameters, learning_rate: f64) -> Self {
        let lengths: Vec<usize> = params
            .layer_weights
            .iter()
            .zip(&params.layer_biases)
            .flat_map(|(w, b)| [w.len(), b.len()])
            .collect();
        Self::new(&lengths, learning_rate)
    }

    /// One bias-corrected Adam update. Gradients are checked for finiteness
    /// before anything is modified.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first_moments.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam parameter list",
                self.first_moments.len(),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.first_moments).enumerate() {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::shape("adam array", m.len(), format!("param {i}")));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient in parameter array {i} at index {j}"
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = self.learning_rate;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moments.iter_mut().zip(self.second_moments.iter_mut()))
        {
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                if lr != 0.0 {
                    let mhat = m[k] / c1;
                    let vhat = v[k] / c2;
                    p[k] -= lr * mhat / (vhat.sqrt() + self.epsilon);
                }
            }
        }
        Ok(())
    }

    /// Applies `grads` to a network's weights and biases.
    pub fn adam_step(&mut self, params: &mut NetworkParameters, grads: &Gradients) -> Result<()> {
        let g = grads.slices();
        let mut p = params.trainable_slices_mut();
        self.step(&mut p, &g)
    }

    pub fn arrays(&self) -> Vec<&[f64]> {
        self.first_moments
            .iter()
            .chain(&self.second_moments)
            .map(Vec::as_slice)
            .collect()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        self.first_moments
            .iter_mut()
            .chain(self.second_moments.iter_mut())
            .map(Vec::as_mut_slice)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_decays_moments_only() {
        let mut opt = OptimizerState::new(&[2], 0.1);
        let mut p = vec![1.0, -2.0];
        opt.step(&mut [&mut p[..]], &[&[1.0, 1.0]]).unwrap();
        let after_first = p.clone();
        let m_before = opt.first_moments[0].clone();
        opt.step(&mut [&mut p[..]], &[&[0.0, 0.0]]).unwrap();
        assert!((opt.first_moments[0][0] - 0.9 * m_before[0]).abs() < 1e-15);
        // the decayed first moment still moves p; a fresh optimizer with zero gradient must not
        let mut fresh = OptimizerState::new(&[2], 0.1);
        let mut q = after_first.clone();
        fresh.step(&mut [&mut q[..]], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(q, after_first);
        assert_eq!(fresh.step, 1);
    }

    #[test]
    fn zero_learning_rate_freezes_params() {
        let mut opt = OptimizerState::new(&[3], 0.0);
        let mut p = vec![0.5, 0.25, -1.0];
        for _ in 0..10 {
            opt.step(&mut [&mut p[..]], &[&[3.0, -1.0, 2.0]]).unwrap();
        }
        assert_eq!(p, vec![0.5, 0.25, -1.0]);
        assert_eq!(opt.step, 10);
    }

    #[test]
    fn constant_gradient_update_approaches_learning_rate() {
        // with g constant, m̂ = g and v̂ = g² exactly, so |Δθ| = lr·|g|/(|g|+ε)
        let lr = 1e-3;
        let mut opt = OptimizerState::new(&[2], lr);
        let mut p = vec![0.0, 0.0];
        let g = [0.37, -4.2];
        let mut last = p.clone();
        for _ in 0..500 {
            opt.step(&mut [&mut p[..]], &[&g]).unwrap();
            for k in 0..2 {
                let delta = (p[k] - last[k]).abs();
                let expected = lr * g[k].abs() / (g[k].abs() + 1e-8);
                assert!((delta - expected).abs() < 1e-12, "{delta} vs {expected}");
            }
            last = p.clone();
        }
        assert!(p[0] < 0.0 && p[1] > 0.0);
    }

    #[test]
    fn non_finite_gradient_reports_array() {
        let mut opt = OptimizerState::new(&[1, 2], 0.1);
        let mut a = vec![0.0];
        let mut b = vec![0.0, 0.0];
        let err = opt
            .step(&mut [&mut a[..], &mut b[..]], &[&[0.0], &[1.0, f64::NAN]])
            .unwrap_err();
        assert!(err.to_string().contains("array 1 at index 1"), "{err}");
        assert_eq!(opt.step, 0);
        assert_eq!(b, vec![0.0, 0.0]);
    }
}
