//! SGD with momentum and coupled weight decay.

use std::ops::{Add, Mul, Sub};

use crate::zoo::ModelHandle;

pub trait Real: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    fn of(x: f64) -> Self;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
}

/// One in-place update of `w` with velocity `v`:
/// `g' = g + λw`, `v = μv + g'`, `w = w − ηv`.
pub fn sgd_momentum_update<T: Real>(w: &mut [T], v: &mut [T], g: &[T], lr: f64, momentum: f64, weight_decay: f64) {
    let (eta, mu, lambda) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        let gd = gi + lambda * *wi;
        *vi = mu * *vi + gd;
        *wi = *wi - eta * *vi;
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per trainable parameter, in visit order.
    velocity: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut ModelHandle) {
        let init = self.velocity.is_empty();
        let (lr, mu, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        let mut i = 0;
        let velocity = &mut self.velocity;
        model.visit_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            if init {
                velocity.push((p.name.clone(), p.shape.clone(), vec![0.0; p.len()]));
            }
            sgd_momentum_update(&mut p.value, &mut velocity[i].2, &p.grad, lr, mu, wd);
            i += 1;
        });
        model.state_version += 1;
    }

    pub fn buffers(&self) -> &[(String, Vec<usize>, Vec<f32>)] {
        &self.velocity
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_step_matches_closed_form() {
        // f(w) = 0.5 * (a w0^2 + b w1^2), so g = (a w0, b w1).
        let (a, b) = (3.0, 0.5);
        let (eta, mu, lambda) = (0.1, 0.9, 5e-4);
        let mut w = [1.5f64, -2.0];
        let mut v = [0.2f64, -0.1];
        let (w0, v0) = (w, v);
        let g = [a * w[0], b * w[1]];
        sgd_momentum_update(&mut w, &mut v, &g, eta, mu, lambda);
        for i in 0..2 {
            let v_exp = mu * v0[i] + g[i] + lambda * w0[i];
            let w_exp = w0[i] - eta * v_exp;
            assert!((v[i] - v_exp).abs() < 1e-10);
            assert!((w[i] - w_exp).abs() < 1e-10);
        }
        // second step from the updated state
        let g = [a * w[0], b * w[1]];
        let (w1, v1) = (w, v);
        sgd_momentum_update(&mut w, &mut v, &g, eta, mu, lambda);
        for i in 0..2 {
            let v_exp = mu * v1[i] + g[i] + lambda * w1[i];
            assert!((w[i] - (w1[i] - eta * v_exp)).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let mut w = [1.0f32, 2.0];
        let mut v = [0.0f32; 2];
        sgd_momentum_update(&mut w, &mut v, &[5.0, -5.0], 0.0, 0.9, 5e-4);
        assert_eq!(w, [1.0, 2.0]);
    }
}
