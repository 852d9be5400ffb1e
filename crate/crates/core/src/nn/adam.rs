use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter first/second moment estimates with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self { config, step_count: 0, first_moment: zeros(), second_moment: zeros() }
    }

    /// One update of every parameter from its stored gradient.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<(), NnError> {
        if params.len() != self.first_moment.len() {
            return Err(NnError::Shape(format!(
                "optimizer tracks {} parameters but {} were supplied",
                self.first_moment.len(),
                params.len()
            )));
        }
        if let Some(idx) = params.iter().position(|p| p.grad().is_none()) {
            return Err(NnError::MissingGrad(idx));
        }
        self.step_count += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first_moment).zip(&mut self.second_moment) {
            let g = p.grad().expect("checked above").to_vec();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p[0].data().to_vec();
        let mut opt = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..10 {
            p[0].set_grad(vec![0.0; 3]).unwrap();
            opt.step(&mut p).unwrap();
        }
        assert_eq!(p[0].data(), &before[..]);
        assert_eq!(opt.step_count, 10);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut p = vec![Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()];
        let mut opt = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..50 {
            p[0].set_grad(vec![3.0, -0.2]).unwrap();
            opt.step(&mut p).unwrap();
        }
        assert!(p[0].data()[0] < 0.0);
        assert!(p[0].data()[1] > 0.0);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = vec![Tensor::zeros(&[2]), Tensor::zeros(&[1])];
        let mut opt = AdamState::new(AdamConfig::default(), &p);
        p[0].set_grad(vec![1.0, 1.0]).unwrap();
        assert_eq!(opt.step(&mut p), Err(NnError::MissingGrad(1)));
        assert_eq!(opt.step_count, 0);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut p = vec![Tensor::new(vec![4], raw.iter().map(|v| v / norm).collect()).unwrap()];
            let cfg = AdamConfig { learning_rate: 0.05, ..AdamConfig::default() };
            let mut opt = AdamState::new(cfg, &p);
            for _ in 0..500 {
                let g: Vec<f64> = p[0].data().iter().map(|w| 2.0 * w).collect();
                p[0].set_grad(g).unwrap();
                opt.step(&mut p).unwrap();
            }
            let n = p[0].data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n < 1e-2, "norm {n}");
        }
    }
}
