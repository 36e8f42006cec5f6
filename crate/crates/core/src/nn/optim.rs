//! SGD with momentum and Adam, operating on externally owned parameters.

use ndarray::ArrayD;

pub trait Optimizer {
    /// Apply one update. `grads[i]` belongs to `params[i]`; a `None` gradient
    /// leaves that parameter untouched.
    fn step(&mut self, params: &mut [&mut ArrayD<f64>], grads: &[Option<&ArrayD<f64>>]);
}

pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [&mut ArrayD<f64>], grads: &[Option<&ArrayD<f64>>]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let Some(g) = g else { continue };
            ndarray::Zip::from(&mut **p)
                .and(v)
                .and(*g)
                .for_each(|pv, vv, &gv| {
                    let eff = gv + self.weight_decay * *pv;
                    *vv = self.momentum * *vv + eff;
                    *pv -= self.lr * *vv;
                });
        }
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            weight_decay,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [&mut ArrayD<f64>], grads: &[Option<&ArrayD<f64>>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let Some(g) = g else { continue };
            ndarray::Zip::from(&mut **p)
                .and(m)
                .and(v)
                .and(*g)
                .for_each(|pv, mv, vv, &gv| {
                    let eff = gv + self.weight_decay * *pv;
                    *mv = self.beta1 * *mv + (1.0 - self.beta1) * eff;
                    *vv = self.beta2 * *vv + (1.0 - self.beta2) * eff * eff;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn sgd_minimizes_quadratic() {
        // f(x) = 0.5 * ||x||^2, grad = x
        let mut x = ArrayD::from_elem(IxDyn(&[3]), 2.0);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        for _ in 0..200 {
            let g = x.clone();
            opt.step(&mut [&mut x], &[Some(&g)]);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = ArrayD::from_elem(IxDyn(&[3]), 2.0);
        let mut opt = Adam::new(0.05, 0.9, 0.999, 0.0);
        for _ in 0..500 {
            let g = x.clone();
            opt.step(&mut [&mut x], &[Some(&g)]);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn missing_grad_skips_param() {
        let mut x = ArrayD::from_elem(IxDyn(&[2]), 1.5);
        let before = x.clone();
        let mut opt = Sgd::new(0.1, 0.9, 1e-2);
        opt.step(&mut [&mut x], &[None]);
        assert_eq!(x, before);
    }
}
