use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::forward::{final_norm_row, forward, unembed_row, AblationSpec, TraceRequest};
use super::ModelWeights;
use crate::error::{input, Result};
use crate::linalg::{dot, layer_norm_row_backward, softmax_inplace};

pub const IG_DEFAULT_STEPS: usize = 20;

/// `P(target)` at the final position and `∂P(target)/∂h`.
///
/// The state is the pre-MLP residual row and the MLP activation row of the
/// last block. The gradient is backpropagated by hand through softmax, the
/// tied unembedding, the final layernorm, the residual addition and `W_proj`.
pub fn target_prob_and_grad(
    weights: &ModelWeights,
    layer: usize,
    resid_pre_mlp: &[f32],
    h: &[f32],
    target: u32,
) -> Result<(f32, Vec<f32>)> {
    let cfg = &weights.config;
    if layer != cfg.last_layer() {
        return Err(input(format!(
            "attribution gradient is only defined at the final layer {}, got {layer}",
            cfg.last_layer()
        )));
    }
    if resid_pre_mlp.len() != cfg.d_model || h.len() != cfg.d_mlp {
        return Err(input("attribution state has wrong dimensions"));
    }
    if target as usize >= cfg.n_vocab {
        return Err(crate::Error::TokenOutOfRange { id: target, vocab: cfg.n_vocab });
    }
    let blk = &weights.blocks[layer];
    let d = cfg.d_model;

    let mut r = resid_pre_mlp.to_vec();
    for (j, rj) in r.iter_mut().enumerate() {
        *rj += blk.b_proj[j];
    }
    for (n, &hn) in h.iter().enumerate() {
        if hn != 0.0 {
            for (rj, w) in r.iter_mut().zip(blk.w_proj.row(n)) {
                *rj += hn * w;
            }
        }
    }
    let z = final_norm_row(weights, &r);
    let mut p = unembed_row(weights, &z);
    softmax_inplace(&mut p);
    let pt = p[target as usize];

    // dP_t/dlogit_v = P_t (δ_tv − p_v)
    let mut dz = vec![0.0f32; d];
    for (v, &pv) in p.iter().enumerate() {
        let g = pt * (if v == target as usize { 1.0 } else { 0.0 } - pv);
        if g != 0.0 {
            for (dzj, w) in dz.iter_mut().zip(weights.wte.row(v)) {
                *dzj += g * w;
            }
        }
    }
    let mut dr = vec![0.0f32; d];
    layer_norm_row_backward(&r, &weights.ln_f.gamma, cfg.ln_eps, &dz, &mut dr);
    let grad = blk.w_proj.rows_iter().map(|row| dot(row, &dr)).collect();
    Ok((pt, grad))
}

/// Integrated gradients from a zero baseline with a right Riemann sum:
/// `attr_n = h_n · mean_k ∂P/∂h_n (α_k h)`, `α_k = k / steps`.
pub fn ig_from_state(
    weights: &ModelWeights,
    layer: usize,
    resid_pre_mlp: &[f32],
    h: &[f32],
    target: u32,
    steps: usize,
) -> Result<Vec<f32>> {
    if steps == 0 {
        return Err(input("integrated gradients needs at least one step"));
    }
    let mut acc = vec![0.0f64; h.len()];
    let mut scaled = vec![0.0f32; h.len()];
    for k in 1..=steps {
        let alpha = k as f32 / steps as f32;
        for (s, &v) in scaled.iter_mut().zip(h) {
            *s = alpha * v;
        }
        let (_, g) = target_prob_and_grad(weights, layer, resid_pre_mlp, &scaled, target)?;
        for (a, gi) in acc.iter_mut().zip(g) {
            *a += gi as f64;
        }
    }
    Ok(h.iter().zip(acc).map(|(&hn, a)| (hn as f64 * a / steps as f64) as f32).collect())
}

/// Integrated-gradients attribution of `P(target)` at the last prompt
/// position to each neuron of `layer`'s MLP.
pub fn ig_attribution(weights: &ModelWeights, prompt: &[u32], target: u32, layer: usize, steps: usize) -> Result<Vec<f32>> {
    if layer != weights.config.last_layer() {
        return Err(input(format!("no stored activation gradient path for layer {layer}")));
    }
    let trace = forward(weights, prompt, &AblationSpec::none(), &TraceRequest::mlp_layer(layer))?;
    let last = prompt.len() - 1;
    let resid = trace.residual_pre_mlp(layer)?.row(last);
    let h = trace.mlp_post(layer)?.row(last);
    ig_from_state(weights, layer, resid, h, target, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::model::{resume_from_mlp, unembed};

    fn setup() -> (ModelWeights, Vec<f32>, Vec<f32>) {
        let w = ModelWeights::random_init(tiny_config(), 5);
        let t = forward(&w, &[3, 8, 1], &AblationSpec::none(), &TraceRequest::mlp_layer(1)).unwrap();
        (w, t.residual_pre_mlp(1).unwrap().row(2).to_vec(), t.mlp_post(1).unwrap().row(2).to_vec())
    }

    /// f64 reference of `P(target)` from the same state.
    fn prob_f64(w: &ModelWeights, resid: &[f32], h: &[f32], target: usize) -> f64 {
        let blk = &w.blocks[1];
        let d = w.config.d_model;
        let mut r: Vec<f64> = (0..d).map(|j| resid[j] as f64 + blk.b_proj[j] as f64).collect();
        for (n, &hn) in h.iter().enumerate() {
            for j in 0..d {
                r[j] += hn as f64 * blk.w_proj.get(n, j) as f64;
            }
        }
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / libm::sqrt(var + w.config.ln_eps as f64);
        let z: Vec<f64> =
            (0..d).map(|j| (r[j] - mean) * inv * w.ln_f.gamma[j] as f64 + w.ln_f.beta[j] as f64).collect();
        let logits: Vec<f64> =
            (0..w.config.n_vocab).map(|v| (0..d).map(|j| z[j] * w.wte.get(v, j) as f64).sum()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logits.iter().map(|l| libm::exp(l - m)).sum();
        libm::exp(logits[target] - m) / s
    }

    #[test]
    fn probability_matches_resumed_forward() {
        let (w, resid, h) = setup();
        let (p, _) = target_prob_and_grad(&w, 1, &resid, &h, 4).unwrap();
        let rm = crate::Matrix::from_vec(1, resid.len(), resid.clone()).unwrap();
        let hm = crate::Matrix::from_vec(1, h.len(), h.clone()).unwrap();
        let mut logits = unembed(&w, &resume_from_mlp(&w, 1, &rm, &hm, &AblationSpec::none()).unwrap()).into_vec();
        softmax_inplace(&mut logits);
        assert!((p - logits[4]).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (w, resid, h) = setup();
        for target in [0u32, 4, 17] {
            let (_, g) = target_prob_and_grad(&w, 1, &resid, &h, target).unwrap();
            for n in 0..w.config.d_mlp {
                let eps = 1e-3f32;
                let mut hp = h.clone();
                hp[n] += eps;
                let mut hm = h.clone();
                hm[n] -= eps;
                let fd = (prob_f64(&w, &resid, &hp, target as usize) - prob_f64(&w, &resid, &hm, target as usize))
                    / (2.0 * eps as f64);
                assert!((g[n] as f64 - fd).abs() <= 0.01 * fd.abs() + 1e-7, "n={n} analytic={} fd={fd}", g[n]);
            }
        }
    }

    #[test]
    fn zero_activation_gives_zero_attribution() {
        let (w, resid, h) = setup();
        let zero = vec![0.0; h.len()];
        assert!(ig_from_state(&w, 1, &resid, &zero, 2, 20).unwrap().iter().all(|a| *a == 0.0));
    }

    #[test]
    fn single_step_is_gradient_times_input() {
        let (w, resid, h) = setup();
        let (_, g) = target_prob_and_grad(&w, 1, &resid, &h, 6).unwrap();
        let a = ig_from_state(&w, 1, &resid, &h, 6, 1).unwrap();
        for n in 0..h.len() {
            assert!((a[n] - g[n] * h[n]).abs() <= 1e-7);
        }
    }

    #[test]
    fn completeness_approaches_probability_gain() {
        let (w, resid, h) = setup();
        let zero = vec![0.0; h.len()];
        let (p1, _) = target_prob_and_grad(&w, 1, &resid, &h, 9).unwrap();
        let (p0, _) = target_prob_and_grad(&w, 1, &resid, &zero, 9).unwrap();
        let a = ig_from_state(&w, 1, &resid, &h, 9, 2000).unwrap();
        let total: f32 = a.iter().sum();
        assert!((total - (p1 - p0)).abs() < 1e-3 * (p1 - p0).abs().max(1e-3));
    }

    #[test]
    fn rejects_non_final_layer_and_zero_steps() {
        let (w, resid, h) = setup();
        assert!(ig_attribution(&w, &[1, 2], 3, 0, 20).is_err());
        assert!(ig_from_state(&w, 1, &resid, &h, 3, 0).is_err());
        assert_eq!(ig_attribution(&w, &[1, 2], 3, 1, 20).unwrap().len(), w.config.d_mlp);
    }
}
