use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for a list of parameter tensors, with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[Vec<usize>]) -> Self {
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Applies one update. `names` label the tensors in error messages.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        names: &[String],
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Config(format!(
                "adam: {} moments, {} params, {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("tensor {i}"));
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::shape(name, self.first[i].shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient { layer: name });
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn zero_gradient_leaves_params_and_moments() {
        let mut st = AdamState::new(AdamConfig::default(), &[vec![1]]);
        let mut p = scalar(0.5);
        st.step(&mut [&mut p], &[scalar(0.0)], &[]).unwrap();
        assert_eq!(p.data(), &[0.5]);
        assert_eq!(st.first[0].data(), &[0.0]);
        assert_eq!(st.second[0].data(), &[0.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut st = AdamState::new(AdamConfig::default(), &[vec![1]]);
        let mut p = scalar(0.0);
        st.step(&mut [&mut p], &[scalar(1.0)], &[]).unwrap();
        // m_hat = 1, v_hat = 1: delta = lr / (1 + eps)
        assert!((p.data()[0] + 2e-4).abs() < 1e-11, "{}", p.data()[0]);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        fn reference(mut p: f64, grads: &[f64]) -> f64 {
            let (lr, b1, b2, eps) = (2e-4, 0.9, 0.999, 1e-8);
            let (mut m, mut v) = (0.0, 0.0);
            for (k, g) in grads.iter().enumerate() {
                let t = (k + 1) as i32;
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            }
            p
        }
        let mut st = AdamState::new(AdamConfig::default(), &[vec![1]]);
        let mut p = scalar(0.3);
        for _ in 0..2 {
            st.step(&mut [&mut p], &[scalar(0.7)], &[]).unwrap();
        }
        assert_eq!(p.data()[0], reference(0.3, &[0.7, 0.7]));
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut st = AdamState::new(AdamConfig::default(), &[vec![1]]);
        let mut p = scalar(0.0);
        let err = st
            .step(
                &mut [&mut p],
                &[scalar(f64::NAN)],
                &["layer07.dense.weight".into()],
            )
            .unwrap_err();
        assert!(err.to_string().contains("layer07.dense.weight"));
        assert_eq!(st.step, 0);
    }
}
