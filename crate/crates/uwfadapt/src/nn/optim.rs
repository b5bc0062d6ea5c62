//! In-place parameter updates. State is allocated lazily on the first step and
//! keyed by parameter order, so the same layer list must be passed every time.

use super::ParamRef;

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Adam {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [ParamRef<'_>]) {
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(vec![0.0; p.grad.len()]);
                self.v.push(vec![0.0; p.grad.len()]);
            }
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for ((value, &g), (mi, vi)) in p
                .value
                .iter_mut()
                .zip(p.grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *value -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Adadelta with an explicit learning-rate multiplier, matching the common
/// deep-learning-framework formulation (accumulator decay `rho`, fuzz `eps`).
pub struct Adadelta {
    lr: f64,
    rho: f64,
    eps: f64,
    acc_grad: Vec<Vec<f64>>,
    acc_update: Vec<Vec<f64>>,
}

impl Adadelta {
    pub fn new(lr: f64, rho: f64) -> Adadelta {
        Adadelta {
            lr,
            rho,
            eps: 1e-7,
            acc_grad: Vec::new(),
            acc_update: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [ParamRef<'_>]) {
        if self.acc_grad.is_empty() {
            for p in params.iter() {
                self.acc_grad.push(vec![0.0; p.grad.len()]);
                self.acc_update.push(vec![0.0; p.grad.len()]);
            }
        }
        assert_eq!(self.acc_grad.len(), params.len(), "parameter list changed");
        for (slot, p) in params.iter_mut().enumerate() {
            let ag = &mut self.acc_grad[slot];
            let au = &mut self.acc_update[slot];
            for ((value, &g), (a, d)) in p
                .value
                .iter_mut()
                .zip(p.grad.iter())
                .zip(ag.iter_mut().zip(au.iter_mut()))
            {
                *a = self.rho * *a + (1.0 - self.rho) * g * g;
                let update = g * ((*d + self.eps).sqrt() / (*a + self.eps).sqrt());
                *d = self.rho * *d + (1.0 - self.rho) * update * update;
                *value -= self.lr * update;
            }
        }
    }
}
