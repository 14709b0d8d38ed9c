use serde::{Deserialize, Serialize};

use super::{Matrix, Param};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Matrix,
    v: Matrix,
}

/// Adam with bias correction. Moment buffers are created on the first step
/// and must see the same parameter list, in the same order, every step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Adam {
        Adam {
            config,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: Matrix::zeros(p.value.rows(), p.value.cols()),
                    v: Matrix::zeros(p.value.rows(), p.value.cols()),
                })
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter list changed between steps");
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (p, mom) in params.iter_mut().zip(&mut self.moments) {
            assert_eq!(p.value.shape(), mom.m.shape(), "parameter shape changed between steps");
            let g = p.grad.data();
            let w = p.value.data_mut();
            let m = mom.m.data_mut();
            let v = mom.v.data_mut();
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let start = Matrix::from_rows(&[[1.0, -2.0]]);
        let mut p = Param::new(start.clone());
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut [&mut p]);
        }
        assert_eq!(p.value, start);
    }

    #[test]
    fn descends_on_square() {
        let mut p = Param::new(Matrix::from_rows(&[[1.0]]));
        p.grad = Matrix::from_rows(&[[2.0]]); // d/dw w^2 at w = 1
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        adam.step(&mut [&mut p]);
        assert!(p.value.get(0, 0) < 1.0);
        assert_eq!(p.grad.get(0, 0), 0.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = 0.5 wᵀ H w − bᵀ w with H = [[3, 1], [1, 2]], b = [1, -1]
        let h = [[3.0, 1.0], [1.0, 2.0]];
        let b = [1.0, -1.0];
        let grad = |w: &[f64]| {
            [
                h[0][0] * w[0] + h[0][1] * w[1] - b[0],
                h[1][0] * w[0] + h[1][1] * w[1] - b[1],
            ]
        };
        let mut p = Param::new(Matrix::from_rows(&[[2.0, 2.0]]));
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..200 {
            let g = grad(p.value.data());
            p.grad = Matrix::row_vector(&g);
            adam.step(&mut [&mut p]);
        }
        let g = grad(p.value.data());
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!(norm < 1e-3, "gradient norm {norm}");
    }
}
