use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::forward::{final_norm_row, forward, unembed, unembed_row, AblationSpec, TraceRequest};
use super::{ModelConfig, ModelWeights};
use crate::error::{input, Error, Result};
use crate::linalg::{argmax, layer_norm, layer_norm_row_backward, log_sum_exp, softmax_inplace, Matrix};

/// Rows per unembedding chunk; bounds the `rows × n_vocab` logit buffers.
const CHUNK: usize = 64;

/// Logit-lens distribution of one block-boundary residual row.
pub fn logit_lens(weights: &ModelWeights, residual_row: &[f32]) -> Vec<f32> {
    let mut p = unembed_row(weights, &final_norm_row(weights, residual_row));
    softmax_inplace(&mut p);
    p
}

/// Lens top-1 token for every row of a residual matrix, through an optional
/// affine probe (`None` is the plain logit lens).
pub fn lens_top1(weights: &ModelWeights, resid: &Matrix, probe: Option<&AffineProbe>) -> Vec<u32> {
    let mut out = Vec::with_capacity(resid.rows());
    let mut start = 0;
    while start < resid.rows() {
        let end = (start + CHUNK).min(resid.rows());
        let mut chunk = resid.slice_rows(start, end);
        if let Some(p) = probe {
            chunk = p.apply(&chunk);
        }
        let ln = &weights.ln_f;
        let logits = unembed(weights, &layer_norm(&chunk, &ln.gamma, &ln.beta, weights.config.ln_eps));
        out.extend(logits.rows_iter().map(|r| argmax(r) as u32));
        start = end;
    }
    out
}

/// `r ↦ r · M + b` on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineProbe {
    pub m: Matrix,
    pub b: Vec<f32>,
}

impl AffineProbe {
    pub fn identity(d: usize) -> Self {
        Self { m: Matrix::identity(d), b: vec![0.0; d] }
    }

    pub fn apply(&self, resid: &Matrix) -> Matrix {
        let mut out = resid.matmul(&self.m);
        out.add_row_vector(&self.b);
        out
    }

    /// Mean-over-tokens `KL(p_final ‖ q_probe)` for one sequence and its
    /// gradient with respect to `M` and `b`.
    ///
    /// `resid` holds the block-boundary residuals the probe reads and
    /// `final_hidden` the model's final-layernorm output at the same tokens.
    pub fn kl_and_grad(&self, weights: &ModelWeights, resid: &Matrix, final_hidden: &Matrix) -> (f64, Matrix, Vec<f32>) {
        let cfg = &weights.config;
        let d = cfg.d_model;
        let t = resid.rows();
        let mut gm = Matrix::zeros(d, d);
        let mut gb = vec![0.0f32; d];
        let mut loss = 0.0f64;
        let mut start = 0;
        while start < t {
            let end = (start + CHUNK).min(t);
            let r = resid.slice_rows(start, end);
            let u = self.apply(&r);
            let ln = &weights.ln_f;
            let z = layer_norm(&u, &ln.gamma, &ln.beta, cfg.ln_eps);
            let mut q = unembed(weights, &z);
            let p_logits = unembed(weights, &final_hidden.slice_rows(start, end));
            let mut dlogits = Matrix::zeros(end - start, cfg.n_vocab);
            for i in 0..end - start {
                let lp_norm = log_sum_exp(p_logits.row(i));
                let qrow = q.row_mut(i);
                let lq_norm = log_sum_exp(qrow);
                let prow = p_logits.row(i);
                let grow = dlogits.row_mut(i);
                for v in 0..cfg.n_vocab {
                    let lp = prow[v] - lp_norm;
                    let lq = qrow[v] - lq_norm;
                    let pv = libm::expf(lp);
                    if pv > 0.0 {
                        loss += pv as f64 * (lp - lq) as f64;
                    }
                    qrow[v] = libm::expf(lq);
                    grow[v] = qrow[v] - pv;
                }
            }
            let dz = dlogits.matmul(&weights.wte);
            let mut du = Matrix::zeros(end - start, d);
            for i in 0..end - start {
                layer_norm_row_backward(u.row(i), &ln.gamma, cfg.ln_eps, dz.row(i), du.row_mut(i));
                for (g, x) in gb.iter_mut().zip(du.row(i)) {
                    *g += x;
                }
            }
            gm.add_assign(&r.t_matmul(&du));
            start = end;
        }
        let scale = 1.0 / t as f32;
        gm.map_inplace(|g| g * scale);
        gb.iter_mut().for_each(|g| *g *= scale);
        (loss / t as f64, gm, gb)
    }

    fn sgd_step(&mut self, lr: f32, gm: &Matrix, gb: &[f32]) {
        for (w, g) in self.m.as_mut_slice().iter_mut().zip(gm.as_slice()) {
            *w -= lr * g;
        }
        for (w, g) in self.b.iter_mut().zip(gb) {
            *w -= lr * g;
        }
    }
}

/// One probe per block boundary: index 0 reads the embedding, index `i + 1`
/// reads the output of block `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TunedLensProbes {
    pub probes: Vec<AffineProbe>,
}

impl TunedLensProbes {
    pub fn identity(config: &ModelConfig) -> Self {
        Self { probes: (0..=config.n_layer).map(|_| AffineProbe::identity(config.d_model)).collect() }
    }

    /// `"emb"` for index 0, otherwise the block number.
    pub fn label(index: usize) -> String {
        if index == 0 {
            "emb".into()
        } else {
            (index - 1).to_string()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TunedLensHyperparams {
    pub learning_rate: f32,
    pub epochs: usize,
}

impl Default for TunedLensHyperparams {
    fn default() -> Self {
        Self { learning_rate: 1e-4, epochs: 2 }
    }
}

/// Mean training loss per probe per epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TunedLensLog {
    pub epoch_loss: Vec<Vec<f64>>,
}

/// Probe-parallel executor: applies the given closure to every
/// `(index, probe)` pair and returns the results in index order.
pub type ProbeMap<'a> = dyn Fn(&mut [AffineProbe], &(dyn Fn(usize, &mut AffineProbe) -> Result<f64> + Sync)) -> Result<Vec<f64>> + 'a;

/// Runs the closure over probes one after another.
pub fn sequential_probe_map(
    probes: &mut [AffineProbe],
    f: &(dyn Fn(usize, &mut AffineProbe) -> Result<f64> + Sync),
) -> Result<Vec<f64>> {
    probes.iter_mut().enumerate().map(|(i, p)| f(i, p)).collect()
}

/// Trains identity-initialised probes with plain SGD, one sequence per step,
/// minimising mean `KL(p_final ‖ q_probe)`.
///
/// The last probe reads the final residual itself, where the identity probe
/// already reproduces the model output exactly, so it is left as is.
/// `map` decides how the independent probe updates of a step are scheduled;
/// results do not depend on it.
pub fn train_tuned_lens(
    weights: &ModelWeights,
    sequences: &[Vec<u32>],
    hp: &TunedLensHyperparams,
    map: &ProbeMap<'_>,
) -> Result<(TunedLensProbes, TunedLensLog)> {
    let cfg = &weights.config;
    if sequences.is_empty() {
        return Err(input("tuned lens needs at least one training sequence"));
    }
    let mut probes = TunedLensProbes::identity(cfg);
    let trained = cfg.n_layer;
    let mut log = TunedLensLog { epoch_loss: vec![Vec::new(); trained + 1] };
    let request = TraceRequest::block_boundaries(cfg);
    let mut step = 0usize;
    for _ in 0..hp.epochs {
        let mut sums = vec![0.0f64; trained];
        for seq in sequences {
            let trace = forward(weights, seq, &AblationSpec::none(), &request)?;
            let resid_of = |i: usize| -> &Matrix {
                if i == 0 {
                    trace.embedding.as_ref().expect("embedding traced")
                } else {
                    trace.layers[i - 1].residual_post_block.as_ref().expect("boundary traced")
                }
            };
            let hidden = &trace.hidden;
            let lr = hp.learning_rate;
            let losses = map(&mut probes.probes[..trained], &|i, probe| {
                let (loss, gm, gb) = probe.kl_and_grad(weights, resid_of(i), hidden);
                if !loss.is_finite() {
                    return Err(Error::Diverged { layer: TunedLensProbes::label(i), step });
                }
                probe.sgd_step(lr, &gm, &gb);
                if probe.m.as_slice().iter().chain(&probe.b).any(|v| !v.is_finite()) {
                    return Err(Error::Diverged { layer: TunedLensProbes::label(i), step });
                }
                Ok(loss)
            })?;
            for (s, l) in sums.iter_mut().zip(losses) {
                *s += l;
            }
            step += 1;
        }
        for (i, s) in sums.into_iter().enumerate() {
            log.epoch_loss[i].push(s / sequences.len() as f64);
        }
        log.epoch_loss[trained].push(0.0);
    }
    Ok((probes, log))
}

impl core::fmt::Display for TunedLensLog {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        for (i, l) in self.epoch_loss.iter().enumerate() {
            writeln!(f, "{}: {:?}", TunedLensProbes::label(i), l)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    fn model() -> ModelWeights {
        ModelWeights::random_init(tiny_config(), 21)
    }

    #[test]
    fn final_boundary_lens_matches_forward_top1() {
        let w = model();
        let toks = [1u32, 5, 9, 2, 2, 7];
        let t = forward(&w, &toks, &AblationSpec::none(), &TraceRequest { logits: true, ..TraceRequest::block_boundaries(&w.config) })
            .unwrap();
        let last = t.residual_post_block(w.config.last_layer()).unwrap();
        let top = lens_top1(&w, last, None);
        let logits = t.logits.as_ref().unwrap();
        for (i, tok) in top.iter().enumerate() {
            assert_eq!(*tok as usize, argmax(logits.row(i)));
            let p = logit_lens(&w, last.row(i));
            assert_eq!(argmax(&p), *tok as usize);
            assert!(((p.iter().sum::<f32>()) - 1.0).abs() < 1e-5);
        }
        let ident = AffineProbe::identity(w.config.d_model);
        assert_eq!(lens_top1(&w, last, Some(&ident)), top);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let w = model();
        let toks = [3u32, 1, 4, 1, 5];
        let t = forward(&w, &toks, &AblationSpec::none(), &TraceRequest::block_boundaries(&w.config)).unwrap();
        let resid = t.embedding.as_ref().unwrap();
        let mut probe = AffineProbe::identity(w.config.d_model);
        probe.m.set(0, 1, 0.3);
        probe.b[2] = -0.2;
        let (_, gm, gb) = probe.kl_and_grad(&w, resid, &t.hidden);
        let eps = 1e-2f32;
        let loss_at = |p: &AffineProbe| p.kl_and_grad(&w, resid, &t.hidden).0;
        for (r, c) in [(0usize, 1usize), (3, 3), (5, 2)] {
            let mut a = probe.clone();
            a.m.set(r, c, a.m.get(r, c) + eps);
            let mut b = probe.clone();
            b.m.set(r, c, b.m.get(r, c) - eps);
            let fd = (loss_at(&a) - loss_at(&b)) / (2.0 * eps as f64);
            assert!((gm.get(r, c) as f64 - fd).abs() < 0.02 * fd.abs() + 1e-4, "M[{r},{c}] {} vs {fd}", gm.get(r, c));
        }
        for j in [0usize, 2, 7] {
            let mut a = probe.clone();
            a.b[j] += eps;
            let mut b = probe.clone();
            b.b[j] -= eps;
            let fd = (loss_at(&a) - loss_at(&b)) / (2.0 * eps as f64);
            assert!((gb[j] as f64 - fd).abs() < 0.02 * fd.abs() + 1e-4, "b[{j}] {} vs {fd}", gb[j]);
        }
    }

    #[test]
    fn final_probe_has_zero_loss_and_zero_steps_is_identity() {
        let w = model();
        let seqs = vec![vec![1u32, 2, 3, 4], vec![5, 6, 7]];
        let t = forward(&w, &seqs[0], &AblationSpec::none(), &TraceRequest::block_boundaries(&w.config)).unwrap();
        let id = AffineProbe::identity(w.config.d_model);
        let (loss, _, _) = id.kl_and_grad(&w, t.residual_post_block(1).unwrap(), &t.hidden);
        assert!(loss.abs() < 1e-6);
        let hp = TunedLensHyperparams { learning_rate: 0.1, epochs: 0 };
        let (probes, _) = train_tuned_lens(&w, &seqs, &hp, &sequential_probe_map).unwrap();
        assert_eq!(probes, TunedLensProbes::identity(&w.config));
    }

    #[test]
    fn training_reduces_loss() {
        let mut w = model();
        // Sharpen the untrained model so the lens targets are far from uniform.
        w.wte.map_inplace(|v| v * 40.0);
        for b in &mut w.blocks {
            b.w_proj.map_inplace(|v| v * 10.0);
        }
        let seqs: Vec<Vec<u32>> = (0..6).map(|s| (0..10).map(|i| ((s * 7 + i * 3) % 20) as u32).collect()).collect();
        let hp = TunedLensHyperparams { learning_rate: 0.05, epochs: 4 };
        let (probes, log) = train_tuned_lens(&w, &seqs, &hp, &sequential_probe_map).unwrap();
        for l in &log.epoch_loss[..w.config.n_layer] {
            assert!(l.last().unwrap() < l.first().unwrap(), "{l:?}");
        }
        assert_eq!(probes.probes[w.config.n_layer], AffineProbe::identity(w.config.d_model));
    }

    #[test]
    fn divergence_is_reported_with_layer_and_step() {
        let w = model();
        let seqs = vec![vec![1u32, 2, 3]];
        let hp = TunedLensHyperparams { learning_rate: f32::INFINITY, epochs: 1 };
        let err = train_tuned_lens(&w, &seqs, &hp, &sequential_probe_map).unwrap_err();
        assert_eq!(err, Error::Diverged { layer: "emb".into(), step: 0 });
    }
}
