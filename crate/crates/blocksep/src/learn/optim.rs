//! Adam optimiser with global gradient-norm clipping.

use crate::masknet::ModelParams;

/// Adam over a flat parameter vector.
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(lr: f64, n_params: usize) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Applies one update in place. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], clip: f64) -> f64 {
        let norm = grads.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = if clip > 0.0 && norm > clip {
            clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        norm
    }
}

/// Adam bound to the mask network's parameter structure.
pub struct Adam {
    state: AdamState,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            state: AdamState::new(lr, n_params),
        }
    }

    /// Applies one update. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, clip: f64) -> f64 {
        let mut flat = params.flatten();
        let g = grads.flatten();
        let norm = self.state.step(&mut flat, &g, clip);
        params.assign_flat(&flat);
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masknet::{init_params, NetConfig};

    fn tiny() -> ModelParams {
        let cfg = NetConfig {
            n_bins: 5,
            hidden: 2,
            trunk_dim: 3,
            emb_hidden1: 2,
            emb_hidden2: 2,
            emb_dim: 2,
            use_gate: true,
            normalize_embedding: false,
            n_speakers: None,
        };
        init_params(&cfg, 1).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut p = tiny();
        let before = p.flatten();
        let mut g = p.zeros_like();
        g.add_scaled(&p, 0.5);
        let mut adam = Adam::new(0.0, p.n_params());
        for _ in 0..10 {
            adam.step(&mut p, &g, 5.0);
        }
        assert_eq!(p.flatten(), before);
    }

    #[test]
    fn gradient_norm_clipping_bounds_the_step() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        g.add_scaled(&p, 1e6);
        let mut adam = Adam::new(1e-3, p.n_params());
        let norm = adam.step(&mut p, &g, 5.0);
        assert!(norm > 5.0);
        assert!(p.flatten().iter().all(|v| v.is_finite()));
    }
}
