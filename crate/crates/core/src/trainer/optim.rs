use serde::{Deserialize, Serialize};

/// Cosine annealing with warm restarts. `step` counts completed updates;
/// cycle `k` lasts `period * mult^k` updates.
pub fn sgdr_lr(step: usize, lr_max: f64, lr_min: f64, period: usize, mult: usize) -> f64 {
    assert!(period > 0 && mult > 0);
    let (mut t_cur, mut t_i) = (step, period);
    if mult == 1 {
        t_cur %= period;
    } else {
        while t_cur >= t_i {
            t_cur -= t_i;
            t_i *= mult;
        }
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t_cur as f64 / t_i as f64).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One bias-corrected update over the concatenation of `params`.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut i = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            assert_eq!(p.len(), g.len());
            for (pv, &gv) in p.iter_mut().zip(g.iter()) {
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                *pv -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                i += 1;
            }
        }
        assert_eq!(i, self.m.len(), "optimizer state length mismatch");
    }
}
