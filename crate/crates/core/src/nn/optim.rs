//! Adam and EMA over flat parameter lists. Parameter order is the nets'
//! `collect_params` order; gradient vectors must match it.

use ndarray::{ArrayD, ArrayViewMutD};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[Vec<usize>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [ArrayViewMutD<'_, f64>], grads: &[ArrayD<f64>]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(m).and(v).and(p).and(g).for_each(
                |m, v, p, &g| {
                    let g = g + self.weight_decay * *p;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                },
            );
        }
    }
}

/// Exponential moving average of parameters, used for sampling-side weights.
pub struct Ema {
    pub decay: f64,
    shadow: Vec<ArrayD<f64>>,
}

impl Ema {
    pub fn from_params(decay: f64, params: &[ndarray::ArrayViewD<'_, f64>]) -> Self {
        Ema {
            decay,
            shadow: params.iter().map(|p| p.to_owned()).collect(),
        }
    }

    pub fn update(&mut self, params: &[ndarray::ArrayViewD<'_, f64>]) {
        for (s, p) in self.shadow.iter_mut().zip(params.iter()) {
            ndarray::Zip::from(s).and(p).for_each(|s, &p| {
                *s = self.decay * *s + (1.0 - self.decay) * p;
            });
        }
    }

    pub fn shadow(&self) -> &[ArrayD<f64>] {
        &self.shadow
    }

    pub fn write_to(&self, params: &mut [ArrayViewMutD<'_, f64>]) {
        for (p, s) in params.iter_mut().zip(self.shadow.iter()) {
            p.assign(s);
        }
    }
}

/// Sums gradient lists elementwise, in index order.
pub fn accumulate(total: &mut Vec<ArrayD<f64>>, part: Vec<ArrayD<f64>>) {
    if total.is_empty() {
        *total = part;
        return;
    }
    assert_eq!(total.len(), part.len());
    for (t, p) in total.iter_mut().zip(part.into_iter()) {
        *t += &p;
    }
}

pub fn scale_grads(grads: &mut [ArrayD<f64>], factor: f64) {
    for g in grads.iter_mut() {
        g.mapv_inplace(|v| v * factor);
    }
}
