use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Block, LayerNormParams, ModelConfig, ModelWeights};
use crate::linalg::Matrix;

/// Standard deviation of the GPT-2 release initialisation.
pub const INIT_STD: f32 = 0.02;

impl ModelWeights {
    /// Untrained weights: every matrix drawn from `N(0, 0.02²)`, biases zero,
    /// layernorm scales one. Tensors are filled in checkpoint order from a
    /// single ChaCha8 stream, so the result depends only on `seed`.
    pub fn random_init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        let mut mat = |rows: usize, cols: usize| {
            let data: Vec<f32> = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Matrix::from_vec(rows, cols, data).expect("shape")
        };
        let d = config.d_model;
        let ln = || LayerNormParams { gamma: vec![1.0; d], beta: vec![0.0; d] };
        let wte = mat(config.n_vocab, d);
        let wpe = mat(config.n_ctx, d);
        let blocks = (0..config.n_layer)
            .map(|_| Block {
                ln1: ln(),
                w_qkv: mat(d, 3 * d),
                b_qkv: vec![0.0; 3 * d],
                w_attn_out: mat(d, d),
                b_attn_out: vec![0.0; d],
                ln2: ln(),
                w_fc: mat(d, config.d_mlp),
                b_fc: vec![0.0; config.d_mlp],
                w_proj: mat(config.d_mlp, d),
                b_proj: vec![0.0; d],
            })
            .collect();
        Self { config, wte, wpe, blocks, ln_f: ln() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    #[test]
    fn same_seed_same_weights() {
        let a = ModelWeights::random_init(tiny_config(), 42);
        assert_eq!(a, ModelWeights::random_init(tiny_config(), 42));
        assert_ne!(a, ModelWeights::random_init(tiny_config(), 43));
        a.validate().unwrap();
    }

    #[test]
    fn moments_match_release_init() {
        let cfg = ModelConfig { n_vocab: 2000, ..tiny_config() };
        let w = ModelWeights::random_init(cfg, 1);
        let v = w.wte.as_slice();
        let n = v.len() as f64;
        let mean = v.iter().map(|x| *x as f64).sum::<f64>() / n;
        let var = v.iter().map(|x| (*x as f64 - mean) * (*x as f64 - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-3);
        assert!((libm::sqrt(var) - 0.02).abs() < 5e-4);
        assert!(w.blocks.iter().all(|b| b.b_fc.iter().all(|x| *x == 0.0) && b.ln2.gamma.iter().all(|x| *x == 1.0)));
    }
}
