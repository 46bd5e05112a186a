//! AdamW with decoupled weight decay over the tiny encoder's parameters.

use crate::encoder::{Gradients, TinyEncoder};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    config: AdamWConfig,
    step: i32,
    m_emb: Vec<F>,
    v_emb: Vec<F>,
    m_proj: Vec<F>,
    v_proj: Vec<F>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig, encoder: &TinyEncoder<F>) -> Self {
        let vocab = encoder.config().vocab_size;
        let dim = encoder.config().dim;
        AdamW {
            config,
            step: 0,
            m_emb: vec![F::zero(); vocab * dim],
            v_emb: vec![F::zero(); vocab * dim],
            m_proj: vec![F::zero(); dim * dim],
            v_proj: vec![F::zero(); dim * dim],
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update of every parameter. Rows without gradient still decay and
    /// follow their moment estimates.
    pub fn step(&mut self, encoder: &mut TinyEncoder<F>, grads: &Gradients<F>) {
        self.step += 1;
        let c = self.config;
        let b1 = F::of(c.beta1);
        let b2 = F::of(c.beta2);
        let bc1 = F::one() - F::of(c.beta1.powi(self.step));
        let bc2 = F::one() - F::of(c.beta2.powi(self.step));
        let lr = F::of(c.lr);
        let eps = F::of(c.eps);
        let decay = F::one() - lr * F::of(c.weight_decay);
        let dim = encoder.config().dim;

        let update = |p: &mut F, m: &mut F, v: &mut F, g: F| {
            *m = b1 * *m + (F::one() - b1) * g;
            *v = b2 * *v + (F::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
        };

        let (emb, proj) = encoder.parameters_mut();
        for (i, ((p, m), v)) in emb
            .iter_mut()
            .zip(self.m_emb.iter_mut())
            .zip(self.v_emb.iter_mut())
            .enumerate()
        {
            let g = grads
                .embeddings
                .get(&(i / dim))
                .map_or(F::zero(), |row| row[i % dim]);
            update(p, m, v, g);
        }
        for (((p, m), v), &g) in proj
            .iter_mut()
            .zip(self.m_proj.iter_mut())
            .zip(self.v_proj.iter_mut())
            .zip(&grads.projection)
        {
            update(p, m, v, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::TinyEncoderConfig;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut enc = TinyEncoder::<f64>::new(TinyEncoderConfig {
            vocab_size: 4,
            dim: 2,
            max_tokens: 8,
            seed: 0,
        })
        .unwrap();
        let before = enc.clone();
        let mut grads = Gradients::zeros(2);
        grads.embeddings.insert(1, vec![0.5, -2.0]);
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0), &enc);
        opt.step(&mut enc, &grads);
        let (emb, proj) = enc.clone().parameters_mut_owned();
        let (emb0, proj0) = before.clone().parameters_mut_owned();
        assert!((emb[2] - (emb0[2] - 0.1)).abs() < 1e-6);
        assert!((emb[3] - (emb0[3] + 0.1)).abs() < 1e-6);
        assert_eq!(emb[0], emb0[0]);
        assert_eq!(proj, proj0);
    }

    trait Owned {
        fn parameters_mut_owned(self) -> (Vec<f64>, Vec<f64>);
    }

    impl Owned for TinyEncoder<f64> {
        fn parameters_mut_owned(mut self) -> (Vec<f64>, Vec<f64>) {
            let (e, p) = self.parameters_mut();
            (e.to_vec(), p.to_vec())
        }
    }
}
