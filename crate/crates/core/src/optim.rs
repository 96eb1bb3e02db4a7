//! Adam with decoupled weight decay.

use crate::model::{Grads, ModelParams};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ModelParams, lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        AdamW {
            lr,
            beta1,
            beta2,
            weight_decay,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Tensors without a gradient still receive weight decay.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, tensor) in params.tensors.iter_mut().enumerate() {
            let decay = 1.0 - self.lr * self.weight_decay;
            let g = grads.tensors.get(i).and_then(|g| g.as_deref());
            for (j, w) in tensor.data.iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *w = *w * decay - self.lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(value: f64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut rng);
        b.constant("w", &[1], value);
        b.params
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(1.0);
        let mut opt = AdamW::new(&p, 0.1, 0.9, 0.99, 0.0);
        let mut g = Grads::new(&p);
        g.tensors[0] = Some(vec![3.0]);
        opt.step(&mut p, &g);
        // bias-corrected first step is lr * sign(g)
        assert!((p.tensors[0].data[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = single(2.0);
        let mut opt = AdamW::new(&p, 0.1, 0.9, 0.99, 0.5);
        let g = Grads::new(&p);
        opt.step(&mut p, &g);
        assert!((p.tensors[0].data[0] - 2.0 * 0.95).abs() < 1e-12);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = single(5.0);
        let mut opt = AdamW::new(&p, 0.05, 0.9, 0.99, 0.0);
        for _ in 0..2000 {
            let w = p.tensors[0].data[0];
            let mut g = Grads::new(&p);
            g.tensors[0] = Some(vec![2.0 * (w - 1.5)]);
            opt.step(&mut p, &g);
        }
        assert!((p.tensors[0].data[0] - 1.5).abs() < 1e-3);
    }
}
