use std::f64::consts::PI;

use crate::autodiff::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (p, g)) in params[k].data_mut().iter_mut().zip(grads[k].data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *p -= lr * (update + self.weight_decay * *p);
            }
        }
    }
}

/// Cosine decay from `lr` at step 0 to 0 at `total`.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    0.5 * lr * (1.0 + (PI * step.min(total) as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::row_vector(vec![1.0, -2.0])];
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &[Tensor::row_vector(vec![0.3, -5.0])], 0.1);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = vec![Tensor::scalar(2.0)];
        let mut opt = AdamW::new(&p, 0.5);
        opt.step(&mut p, &[Tensor::scalar(0.0)], 0.1);
        assert!((p[0].item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::scalar(3.0)];
        let mut opt = AdamW::new(&p, 0.0);
        for _ in 0..2000 {
            let g = Tensor::scalar(2.0 * (p[0].item() - 1.0));
            opt.step(&mut p, &[g], 0.01);
        }
        assert!((p[0].item() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
    }
}
