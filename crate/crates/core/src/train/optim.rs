//! First/second-moment adaptive optimizer.

use serde::{Deserialize, Serialize};

pub const DEFAULT_LR_LOGITS: f64 = 5e-3;
pub const DEFAULT_LR_CODEBOOK: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_logits: f64,
    pub lr_codebook: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_logits: DEFAULT_LR_LOGITS,
            lr_codebook: DEFAULT_LR_CODEBOOK,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    /// Completed steps.
    pub step: u64,
    pub logits: Moments,
    pub codebooks: Vec<Moments>,
}

impl OptimState {
    pub fn new(config: AdamConfig, num_logits: usize, codebook_lens: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            logits: Moments::new(num_logits),
            codebooks: codebook_lens.iter().map(|&n| Moments::new(n)).collect(),
        }
    }

    /// Applies one update to all parameter groups.
    pub fn step(&mut self, logits: &mut [f64], grad_logits: &[f64], books: &mut [Vec<f64>], grad_books: &[Vec<f64>]) {
        self.step += 1;
        let cfg = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        update(&cfg, cfg.lr_logits, c1, c2, &mut self.logits, logits, grad_logits);
        for ((mom, p), g) in self.codebooks.iter_mut().zip(books).zip(grad_books) {
            update(&cfg, cfg.lr_codebook, c1, c2, mom, p, g);
        }
    }
}

fn update(cfg: &AdamConfig, lr: f64, c1: f64, c2: f64, mom: &mut Moments, params: &mut [f64], grads: &[f64]) {
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut mom.m).zip(&mut mom.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    }
}
