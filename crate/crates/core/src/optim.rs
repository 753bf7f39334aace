//! First-order optimizers over named parameter matrices.

use std::collections::BTreeMap;

use crate::tape::Matrix;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Advances the shared step counter; call once per update round.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Matrix, grad: &Matrix, lr: f64) {
        assert!(self.step > 0, "begin_step must be called before update");
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Matrix::zeros(param.dim()), Matrix::zeros(param.dim())));
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        ndarray::Zip::from(param)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: BTreeMap<String, Matrix>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, name: &str, param: &mut Matrix, grad: &Matrix, lr: f64) {
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Matrix::zeros(param.dim()));
        let mu = self.momentum;
        ndarray::Zip::from(param).and(v).and(grad).for_each(|p, v, &g| {
            *v = mu * *v + g;
            *p -= lr * *v;
        });
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<'a>(grads: impl IntoIterator<Item = &'a mut Matrix>, max_norm: f64) -> f64 {
    let mut grads: Vec<&mut Matrix> = grads.into_iter().collect();
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient_sign() {
        let mut opt = Adam::default();
        let mut p = array![[1.0, -2.0]];
        opt.begin_step();
        opt.update("p", &mut p, &array![[0.3, -5.0]], 0.1);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = SgdMomentum::new(0.9);
        let mut p = array![[0.0]];
        let g = array![[1.0]];
        opt.update("p", &mut p, &g, 0.1);
        assert!((p[[0, 0]] + 0.1).abs() < 1e-12);
        opt.update("p", &mut p, &g, 0.1);
        assert!((p[[0, 0]] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Adam::default();
        let mut p = array![[3.0, -4.0]];
        for _ in 0..2000 {
            let g = &p * 2.0;
            opt.begin_step();
            opt.update("p", &mut p, &g, 0.05);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut a = array![[3.0]];
        let mut b = array![[4.0]];
        let n = clip_global_norm([&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[[0, 0]] - 0.6).abs() < 1e-12 && (b[[0, 0]] - 0.8).abs() < 1e-12);
        let mut c = array![[0.1]];
        clip_global_norm([&mut c], 1.0);
        assert_eq!(c[[0, 0]], 0.1);
    }
}
