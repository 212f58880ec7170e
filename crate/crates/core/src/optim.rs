//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use std::ops::Range;

/// Learning rate at `step` of `total`, annealed from `lr_max` to `lr_min`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total <= 1 {
        return lr_max;
    }
    let t = step as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    decay_mask: Vec<bool>,
}

impl AdamW {
    /// `decay_ranges` lists the flat-vector spans that receive weight decay.
    pub fn new(n: usize, weight_decay: f64, decay_ranges: impl IntoIterator<Item = Range<usize>>) -> Self {
        let mut decay_mask = vec![false; n];
        for r in decay_ranges {
            decay_mask[r].iter_mut().for_each(|d| *d = true);
        }
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            decay_mask,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            if self.decay_mask[i] {
                params[i] -= lr * self.weight_decay * params[i];
            }
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 0.0), 1e-3);
        assert!(cosine_lr(9, 10, 1e-3, 0.0).abs() < 1e-18);
        assert!((cosine_lr(5, 11, 2.0, 0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias correction makes the first Adam step exactly lr·sign(g).
        let mut opt = AdamW::new(2, 0.0, []);
        let mut p = [1.0, -1.0];
        opt.step(&mut p, &[0.3, -5.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_only_on_masked_entries() {
        let mut opt = AdamW::new(2, 0.5, [0..1]);
        let mut p = [2.0, 2.0];
        opt.step(&mut p, &[0.0, 0.0], 0.1);
        assert_eq!(p, [1.9, 2.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdamW::new(1, 0.0, []);
        let mut p = [3.0];
        for s in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            opt.step(&mut p, &g, cosine_lr(s, 2000, 0.05, 0.0));
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }
}
