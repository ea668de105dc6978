use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use super::{Block, ModelConfig, ModelWeights};
use crate::error::{input, Error, Result};
use crate::linalg::{gelu, gemm, layer_norm, layer_norm_row, log_sum_exp, Matrix, View, ViewMut};

/// Surgical edits applied during a forward pass.
///
/// Edits act on the post-GELU activation `h` of an MLP before it is projected
/// by `W_proj`. Overrides and zeroing apply at every position of the sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationSpec {
    /// Drops the whole MLP contribution of this layer, bias included.
    pub zero_mlp_at_layer: Option<usize>,
    pub zero_neurons: Option<(usize, Vec<usize>)>,
    pub override_neurons: Option<(usize, Vec<(usize, f32)>)>,
    /// Multiplies all of `h` by `α ∈ [0, 1]` (integrated-gradients path).
    pub scale_h: Option<(usize, f32)>,
}

impl AblationSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn zero_mlp(layer: usize) -> Self {
        Self { zero_mlp_at_layer: Some(layer), ..Self::default() }
    }

    pub fn zero_neurons(layer: usize, neurons: impl Into<Vec<usize>>) -> Self {
        Self { zero_neurons: Some((layer, neurons.into())), ..Self::default() }
    }

    pub fn override_neurons(layer: usize, values: impl Into<Vec<(usize, f32)>>) -> Self {
        Self { override_neurons: Some((layer, values.into())), ..Self::default() }
    }

    pub fn scale_h(layer: usize, alpha: f32) -> Self {
        Self { scale_h: Some((layer, alpha)), ..Self::default() }
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let layer_ok = |l: usize| {
            if l < config.n_layer {
                Ok(())
            } else {
                Err(input(format!("ablation layer {l} out of range")))
            }
        };
        let neuron_ok = |n: usize| {
            if n < config.d_mlp {
                Ok(())
            } else {
                Err(input(format!("ablation neuron {n} out of range")))
            }
        };
        if let Some(l) = self.zero_mlp_at_layer {
            layer_ok(l)?;
        }
        if let Some((l, alpha)) = self.scale_h {
            layer_ok(l)?;
            if !(0.0..=1.0).contains(&alpha) {
                return Err(input(format!("scale_h alpha {alpha} outside [0, 1]")));
            }
            if self.zero_mlp_at_layer == Some(l) {
                return Err(input(format!("layer {l} has both zero_mlp and scale_h")));
            }
        }
        if let Some((l, ns)) = &self.zero_neurons {
            layer_ok(*l)?;
            ns.iter().try_for_each(|n| neuron_ok(*n))?;
        }
        if let Some((l, vs)) = &self.override_neurons {
            layer_ok(*l)?;
            vs.iter().try_for_each(|(n, _)| neuron_ok(*n))?;
            if let Some((zl, zs)) = &self.zero_neurons {
                if zl == l && vs.iter().any(|(n, _)| zs.contains(n)) {
                    return Err(input("zero_neurons and override_neurons overlap"));
                }
            }
        }
        Ok(())
    }

    /// Lowest layer touched by the spec.
    pub fn earliest_layer(&self) -> Option<usize> {
        [
            self.zero_mlp_at_layer,
            self.zero_neurons.as_ref().map(|z| z.0),
            self.override_neurons.as_ref().map(|o| o.0),
            self.scale_h.map(|s| s.0),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    pub(crate) fn apply_h(&self, layer: usize, h: &mut Matrix) {
        if let Some((l, alpha)) = self.scale_h {
            if l == layer {
                h.map_inplace(|v| v * alpha);
            }
        }
        if let Some((l, ns)) = &self.zero_neurons {
            if *l == layer {
                for r in 0..h.rows() {
                    let row = h.row_mut(r);
                    for &n in ns {
                        row[n] = 0.0;
                    }
                }
            }
        }
        if let Some((l, vs)) = &self.override_neurons {
            if *l == layer {
                for r in 0..h.rows() {
                    let row = h.row_mut(r);
                    for &(n, v) in vs {
                        row[n] = v;
                    }
                }
            }
        }
    }

    pub(crate) fn removes_mlp(&self, layer: usize) -> bool {
        self.zero_mlp_at_layer == Some(layer)
    }
}

/// Which intermediate tensors a forward pass should keep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceRequest {
    /// Residual entering block 0 (token + position embedding).
    pub embedding: bool,
    pub residual_pre_mlp: Vec<usize>,
    pub residual_post_block: Vec<usize>,
    /// Keeps both the pre-GELU `x` and post-GELU `h` of these layers.
    pub mlp_activations: Vec<usize>,
    /// `(layer, head)` attention patterns.
    pub attention: Vec<(usize, usize)>,
    pub logits: bool,
}

impl TraceRequest {
    pub fn logits() -> Self {
        Self { logits: true, ..Self::default() }
    }

    /// Pre-MLP residual and MLP activations of one layer.
    pub fn mlp_layer(layer: usize) -> Self {
        Self { residual_pre_mlp: alloc::vec![layer], mlp_activations: alloc::vec![layer], ..Self::default() }
    }

    /// Every block-boundary residual (embedding plus each block output).
    pub fn block_boundaries(config: &ModelConfig) -> Self {
        Self { embedding: true, residual_post_block: (0..config.n_layer).collect(), ..Self::default() }
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        let layers = self.residual_pre_mlp.iter().chain(&self.residual_post_block).chain(&self.mlp_activations);
        for &l in layers.chain(self.attention.iter().map(|(l, _)| l)) {
            if l >= config.n_layer {
                return Err(input(format!("trace layer {l} out of range")));
            }
        }
        if let Some((_, h)) = self.attention.iter().find(|(_, h)| *h >= config.n_head) {
            return Err(input(format!("trace head {h} out of range")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerTrace {
    pub residual_pre_mlp: Option<Matrix>,
    pub residual_post_block: Option<Matrix>,
    /// Pre-GELU MLP input `x = W_fc · ln2(resid) + b_fc`.
    pub mlp_pre: Option<Matrix>,
    /// `h = GELU(x)`, before any ablation edits.
    pub mlp_post: Option<Matrix>,
}

/// Result of a traced forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub tokens: Vec<u32>,
    pub embedding: Option<Matrix>,
    pub layers: Vec<LayerTrace>,
    /// `(layer, head)` → `tokens × tokens` lower-triangular attention weights.
    pub attention: BTreeMap<(usize, usize), Matrix>,
    /// Final-layernorm output, `tokens × d`.
    pub hidden: Matrix,
    pub logits: Option<Matrix>,
}

impl Trace {
    fn missing(what: &str, layer: usize) -> Error {
        input(format!("{what} not traced at layer {layer}"))
    }

    pub fn residual_pre_mlp(&self, layer: usize) -> Result<&Matrix> {
        self.layers.get(layer).and_then(|l| l.residual_pre_mlp.as_ref()).ok_or_else(|| Self::missing("pre-MLP residual", layer))
    }

    pub fn residual_post_block(&self, layer: usize) -> Result<&Matrix> {
        self.layers
            .get(layer)
            .and_then(|l| l.residual_post_block.as_ref())
            .ok_or_else(|| Self::missing("post-block residual", layer))
    }

    pub fn mlp_pre(&self, layer: usize) -> Result<&Matrix> {
        self.layers.get(layer).and_then(|l| l.mlp_pre.as_ref()).ok_or_else(|| Self::missing("pre-GELU activation", layer))
    }

    pub fn mlp_post(&self, layer: usize) -> Result<&Matrix> {
        self.layers.get(layer).and_then(|l| l.mlp_post.as_ref()).ok_or_else(|| Self::missing("post-GELU activation", layer))
    }
}

/// Runs GPT-2 on `tokens`.
pub fn forward(weights: &ModelWeights, tokens: &[u32], ablation: &AblationSpec, request: &TraceRequest) -> Result<Trace> {
    let cfg = &weights.config;
    validate_tokens(cfg, tokens)?;
    ablation.validate(cfg)?;
    request.validate(cfg)?;

    let mut resid = embed(weights, tokens);
    let mut trace = Trace {
        tokens: tokens.to_vec(),
        embedding: request.embedding.then(|| resid.clone()),
        layers: alloc::vec![LayerTrace::default(); cfg.n_layer],
        attention: BTreeMap::new(),
        hidden: Matrix::zeros(0, 0),
        logits: None,
    };
    for layer in 0..cfg.n_layer {
        block_forward(weights, layer, &mut resid, ablation, Some((request, &mut trace)));
    }
    trace.hidden = final_norm(weights, &resid);
    if request.logits {
        trace.logits = Some(unembed(weights, &trace.hidden));
    }
    Ok(trace)
}

fn validate_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(input("empty token sequence"));
    }
    if tokens.len() > cfg.n_ctx {
        return Err(Error::SequenceTooLong { len: tokens.len(), max: cfg.n_ctx });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.n_vocab) {
        return Err(Error::TokenOutOfRange { id, vocab: cfg.n_vocab });
    }
    Ok(())
}

fn embed(weights: &ModelWeights, tokens: &[u32]) -> Matrix {
    let d = weights.config.d_model;
    let mut resid = Matrix::zeros(tokens.len(), d);
    for (pos, &tok) in tokens.iter().enumerate() {
        let row = resid.row_mut(pos);
        let te = weights.wte.row(tok as usize);
        let pe = weights.wpe.row(pos);
        for i in 0..d {
            row[i] = te[i] + pe[i];
        }
    }
    resid
}

fn final_norm(weights: &ModelWeights, resid: &Matrix) -> Matrix {
    layer_norm(resid, &weights.ln_f.gamma, &weights.ln_f.beta, weights.config.ln_eps)
}

fn block_forward(
    weights: &ModelWeights,
    layer: usize,
    resid: &mut Matrix,
    ablation: &AblationSpec,
    mut tracing: Option<(&TraceRequest, &mut Trace)>,
) {
    let cfg = &weights.config;
    let blk = &weights.blocks[layer];

    let heads: Vec<usize> = match &tracing {
        Some((req, _)) => req.attention.iter().filter(|(l, _)| *l == layer).map(|(_, h)| *h).collect(),
        None => Vec::new(),
    };
    let (z, patterns) = attention_z(cfg, blk, resid, &heads);
    let mut attn_out = z.matmul(&blk.w_attn_out);
    attn_out.add_row_vector(&blk.b_attn_out);
    resid.add_assign(&attn_out);

    let m = layer_norm(resid, &blk.ln2.gamma, &blk.ln2.beta, cfg.ln_eps);
    let mut x = m.matmul(&blk.w_fc);
    x.add_row_vector(&blk.b_fc);
    let mut h = x.clone();
    h.map_inplace(gelu);

    if let Some((req, trace)) = tracing.as_mut() {
        for (head, p) in heads.iter().zip(patterns) {
            trace.attention.insert((layer, *head), p);
        }
        let lt = &mut trace.layers[layer];
        if req.residual_pre_mlp.contains(&layer) {
            lt.residual_pre_mlp = Some(resid.clone());
        }
        if req.mlp_activations.contains(&layer) {
            lt.mlp_pre = Some(x);
            lt.mlp_post = Some(h.clone());
        }
    }

    ablation.apply_h(layer, &mut h);
    if !ablation.removes_mlp(layer) {
        resid.add_assign(&mlp_project(blk, &h));
    }

    if let Some((req, trace)) = tracing {
        if req.residual_post_block.contains(&layer) {
            trace.layers[layer].residual_post_block = Some(resid.clone());
        }
    }
}

/// Concatenated per-head attention outputs (before the output projection),
/// plus the attention patterns of the requested heads.
fn attention_z(cfg: &ModelConfig, blk: &Block, resid: &Matrix, traced_heads: &[usize]) -> (Matrix, Vec<Matrix>) {
    let t = resid.rows();
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let a = layer_norm(resid, &blk.ln1.gamma, &blk.ln1.beta, cfg.ln_eps);
    let mut qkv = a.matmul(&blk.w_qkv);
    qkv.add_row_vector(&blk.b_qkv);

    let scale = 1.0 / libm::sqrtf(dh as f32);
    let mut z = Matrix::zeros(t, d);
    let mut scores = alloc::vec![0.0f32; t * t];
    let mut patterns = Vec::new();
    let data = qkv.as_slice();
    for head in 0..cfg.n_head {
        let q = View::new(&data[head * dh..], t, dh, 3 * d, 1);
        let k = View::new(&data[d + head * dh..], t, dh, 3 * d, 1);
        let v = View::new(&data[2 * d + head * dh..], t, dh, 3 * d, 1);
        gemm(scale, q, k.t(), 0.0, ViewMut::new(&mut scores, t, t, t, 1));
        for i in 0..t {
            let row = &mut scores[i * t..(i + 1) * t];
            crate::linalg::softmax_inplace(&mut row[..=i]);
            row[i + 1..].fill(0.0);
        }
        gemm(1.0, View::new(&scores, t, t, t, 1), v, 0.0, ViewMut::new(&mut z.as_mut_slice()[head * dh..], t, dh, d, 1));
        if traced_heads.contains(&head) {
            patterns.push(Matrix::from_vec(t, t, scores.clone()).expect("square pattern"));
        }
    }
    (z, patterns)
}

/// Each head's contribution to the attention output of `layer` given the
/// residual stream entering the block, excluding the output bias.
///
/// Summing the returned matrices and adding `b_attn_out` reproduces the fused
/// attention output up to float rounding.
pub fn head_contributions(weights: &ModelWeights, layer: usize, resid: &Matrix) -> (Matrix, Vec<Matrix>) {
    let cfg = &weights.config;
    let blk = &weights.blocks[layer];
    let (z, _) = attention_z(cfg, blk, resid, &[]);
    let mut fused = z.matmul(&blk.w_attn_out);
    fused.add_row_vector(&blk.b_attn_out);
    let dh = cfg.d_head();
    let t = z.rows();
    let per_head = (0..cfg.n_head)
        .map(|h| {
            let mut out = Matrix::zeros(t, cfg.d_model);
            let zs = View::new(&z.as_slice()[h * dh..], t, dh, cfg.d_model, 1);
            let wo = View::new(&blk.w_attn_out.as_slice()[h * dh * cfg.d_model..], dh, cfg.d_model, cfg.d_model, 1);
            gemm(1.0, zs, wo, 0.0, out.view_mut());
            out
        })
        .collect();
    (fused, per_head)
}

/// `h · W_proj + b_proj`.
pub fn mlp_project(blk: &Block, h: &Matrix) -> Matrix {
    let mut out = h.matmul(&blk.w_proj);
    out.add_row_vector(&blk.b_proj);
    out
}

/// Finishes a forward pass from a layer's pre-MLP residual and its unedited
/// MLP activation `h`, applying `ablation` from that layer on. Returns the
/// final-layernorm output. Produces the same values as [`forward`] with the
/// same ablation.
pub fn resume_from_mlp(
    weights: &ModelWeights,
    layer: usize,
    resid_pre_mlp: &Matrix,
    h: &Matrix,
    ablation: &AblationSpec,
) -> Result<Matrix> {
    let cfg = &weights.config;
    if layer >= cfg.n_layer {
        return Err(input(format!("layer {layer} out of range")));
    }
    ablation.validate(cfg)?;
    if ablation.earliest_layer().is_some_and(|l| l < layer) {
        return Err(input("ablation touches a layer before the resume point"));
    }
    if h.rows() != resid_pre_mlp.rows() || h.cols() != cfg.d_mlp || resid_pre_mlp.cols() != cfg.d_model {
        return Err(input("resume state has inconsistent shapes"));
    }
    let blk = &weights.blocks[layer];
    let mut resid = resid_pre_mlp.clone();
    let mut h = h.clone();
    ablation.apply_h(layer, &mut h);
    if !ablation.removes_mlp(layer) {
        resid.add_assign(&mlp_project(blk, &h));
    }
    for l in layer + 1..cfg.n_layer {
        block_forward(weights, l, &mut resid, ablation, None);
    }
    Ok(final_norm(weights, &resid))
}

/// Full logits `hidden · wteᵀ`.
pub fn unembed(weights: &ModelWeights, hidden: &Matrix) -> Matrix {
    hidden.matmul_t(&weights.wte)
}

pub fn unembed_row(weights: &ModelWeights, hidden_row: &[f32]) -> Vec<f32> {
    let m = Matrix::from_vec(1, hidden_row.len(), hidden_row.to_vec()).expect("row");
    unembed(weights, &m).into_vec()
}

const LOGIT_CHUNK: usize = 32;

/// `ln P(targets[i])` under the distribution read from `hidden` row `i`.
pub fn target_log_probs(weights: &ModelWeights, hidden: &Matrix, targets: &[u32]) -> Vec<f32> {
    assert!(targets.len() <= hidden.rows());
    let mut out = Vec::with_capacity(targets.len());
    let mut start = 0;
    while start < targets.len() {
        let end = (start + LOGIT_CHUNK).min(targets.len());
        let logits = unembed(weights, &hidden.slice_rows(start, end));
        for (i, &t) in targets[start..end].iter().enumerate() {
            let row = logits.row(i);
            out.push(row[t as usize] - log_sum_exp(row));
        }
        start = end;
    }
    out
}

/// Attention weight that each query position of `(layer, head)` puts on
/// position 0.
pub fn bos_attention_mass(trace: &Trace, layer: usize, head: usize) -> Result<Vec<f32>> {
    let pattern = trace
        .attention
        .get(&(layer, head))
        .ok_or_else(|| input(format!("attention for layer {layer} head {head} not traced")))?;
    Ok(pattern.column(0))
}

/// Something that scores next-token predictions over a sequence.
pub trait NextTokenScorer {
    /// `ln P(tokens[t + 1] | tokens[..=t])` for `t in 0..len - 1`.
    fn next_token_log_probs(&self, tokens: &[u32]) -> Result<Vec<f32>>;
}

/// GPT-2 with an optional ablation.
pub struct Gpt2Scorer<'a> {
    pub weights: &'a ModelWeights,
    pub ablation: &'a AblationSpec,
}

impl NextTokenScorer for Gpt2Scorer<'_> {
    fn next_token_log_probs(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let trace = forward(self.weights, tokens, self.ablation, &TraceRequest::default())?;
        Ok(target_log_probs(self.weights, &trace.hidden, &tokens[1..]))
    }
}

/// Sum of negative log-likelihoods (nats) and the number of predicted
/// tokens. Position 0 is never predicted.
pub fn sequence_nll<S: NextTokenScorer + ?Sized>(scorer: &S, tokens: &[u32]) -> Result<(f64, usize)> {
    let lps = scorer.next_token_log_probs(tokens)?;
    Ok((lps.iter().map(|lp| -(*lp as f64)).sum(), lps.len()))
}

/// `exp(mean NLL)` over all predicted tokens of all sequences.
pub fn perplexity<S: NextTokenScorer + ?Sized>(scorer: &S, sequences: &[Vec<u32>]) -> Result<f64> {
    if sequences.is_empty() {
        return Err(input("empty corpus"));
    }
    let (mut total, mut count) = (0.0f64, 0usize);
    for seq in sequences {
        let (nll, n) = sequence_nll(scorer, seq)?;
        total += nll;
        count += n;
    }
    if count == 0 {
        return Err(input("corpus has no predicted tokens"));
    }
    Ok(libm::exp(total / count as f64))
}

/// Post-final-layernorm vector for a single residual row.
pub(crate) fn final_norm_row(weights: &ModelWeights, resid: &[f32]) -> Vec<f32> {
    let mut out = alloc::vec![0.0; resid.len()];
    layer_norm_row(resid, &weights.ln_f.gamma, &weights.ln_f.beta, weights.config.ln_eps, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    fn model() -> ModelWeights {
        ModelWeights::random_init(tiny_config(), 11)
    }

    fn full_trace(cfg: &ModelConfig) -> TraceRequest {
        TraceRequest {
            embedding: true,
            residual_pre_mlp: (0..cfg.n_layer).collect(),
            residual_post_block: (0..cfg.n_layer).collect(),
            mlp_activations: (0..cfg.n_layer).collect(),
            attention: (0..cfg.n_layer).flat_map(|l| (0..cfg.n_head).map(move |h| (l, h))).collect(),
            logits: true,
        }
    }

    #[test]
    fn trace_contains_exactly_what_was_requested() {
        let w = model();
        let req = TraceRequest { residual_pre_mlp: alloc::vec![1], attention: alloc::vec![(0, 1)], ..TraceRequest::default() };
        let t = forward(&w, &[1, 2, 3], &AblationSpec::none(), &req).unwrap();
        assert!(t.residual_pre_mlp(1).is_ok());
        assert!(t.residual_pre_mlp(0).is_err());
        assert!(t.mlp_post(1).is_err());
        assert!(t.logits.is_none());
        assert!(t.embedding.is_none());
        assert_eq!(t.attention.keys().copied().collect::<Vec<_>>(), alloc::vec![(0, 1)]);
    }

    #[test]
    fn traced_h_is_gelu_of_x_and_blocks_add_up() {
        let w = model();
        let cfg = w.config;
        let t = forward(&w, &[4, 5, 6, 7], &AblationSpec::none(), &full_trace(&cfg)).unwrap();
        for l in 0..cfg.n_layer {
            let x = t.mlp_pre(l).unwrap();
            let h = t.mlp_post(l).unwrap();
            for (a, b) in x.as_slice().iter().zip(h.as_slice()) {
                assert_eq!(gelu(*a), *b);
            }
            let mut expect = t.residual_pre_mlp(l).unwrap().clone();
            expect.add_assign(&mlp_project(&w.blocks[l], h));
            for (a, b) in expect.as_slice().iter().zip(t.residual_post_block(l).unwrap().as_slice()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn single_token_forward_and_position_zero_attends_to_itself() {
        let w = model();
        let t = forward(&w, &[0], &AblationSpec::none(), &full_trace(&w.config)).unwrap();
        let logits = t.logits.as_ref().unwrap();
        assert_eq!(logits.shape(), (1, w.config.n_vocab));
        assert!(logits.as_slice().iter().all(|v| v.is_finite()));
        let t = forward(&w, &[3, 1, 4, 1, 5], &AblationSpec::none(), &full_trace(&w.config)).unwrap();
        let mass = bos_attention_mass(&t, 1, 0).unwrap();
        assert_eq!(mass[0], 1.0);
        assert!(mass.iter().all(|m| (0.0..=1.0).contains(m)));
        assert!(bos_attention_mass(&forward(&w, &[1], &AblationSpec::none(), &TraceRequest::default()).unwrap(), 0, 0).is_err());
    }

    #[test]
    fn causal_mask_hides_future_tokens() {
        let w = model();
        let a = forward(&w, &[1, 2, 3, 4, 5], &AblationSpec::none(), &TraceRequest::logits()).unwrap();
        let b = forward(&w, &[1, 2, 3, 9, 0], &AblationSpec::none(), &TraceRequest::logits()).unwrap();
        let (la, lb) = (a.logits.unwrap(), b.logits.unwrap());
        for pos in 0..3 {
            assert_eq!(la.row(pos), lb.row(pos));
        }
        assert_ne!(la.row(3), lb.row(3));
    }

    #[test]
    fn ablation_leaves_earlier_layers_untouched() {
        let w = model();
        let req = full_trace(&w.config);
        let base = forward(&w, &[2, 7, 1, 8], &AblationSpec::none(), &req).unwrap();
        let abl = forward(&w, &[2, 7, 1, 8], &AblationSpec::zero_mlp(1), &req).unwrap();
        assert_eq!(base.layers[0], abl.layers[0]);
        assert_eq!(base.residual_pre_mlp(1).unwrap(), abl.residual_pre_mlp(1).unwrap());
        assert_eq!(base.mlp_post(1).unwrap(), abl.mlp_post(1).unwrap());
        assert_ne!(base.logits, abl.logits);
    }

    #[test]
    fn resume_reproduces_forward_bit_for_bit() {
        let w = model();
        let toks = [5u32, 3, 9, 9, 2];
        let req = TraceRequest::mlp_layer(1);
        let base = forward(&w, &toks, &AblationSpec::none(), &req).unwrap();
        let pre = base.residual_pre_mlp(1).unwrap();
        let h = base.mlp_post(1).unwrap();
        for spec in [
            AblationSpec::none(),
            AblationSpec::zero_mlp(1),
            AblationSpec::zero_neurons(1, alloc::vec![0, 3, 7]),
            AblationSpec::override_neurons(1, alloc::vec![(2, 0.5), (4, -0.1)]),
            AblationSpec::scale_h(1, 0.25),
        ] {
            let full = forward(&w, &toks, &spec, &TraceRequest::default()).unwrap();
            let resumed = resume_from_mlp(&w, 1, pre, h, &spec).unwrap();
            assert_eq!(full.hidden, resumed, "{spec:?}");
        }
        assert!(resume_from_mlp(&w, 1, pre, h, &AblationSpec::zero_mlp(0)).is_err());
    }

    #[test]
    fn overriding_with_original_values_is_identity() {
        let w = model();
        let toks = [1u32, 2, 3];
        let base = forward(&w, &toks, &AblationSpec::none(), &TraceRequest::mlp_layer(1)).unwrap();
        let h = base.mlp_post(1).unwrap();
        // Same value at every position only for a constant column; use a length-1 prompt.
        let one = forward(&w, &[7], &AblationSpec::none(), &TraceRequest::mlp_layer(1)).unwrap();
        let vals: Vec<(usize, f32)> = (0..4).map(|n| (n, one.mlp_post(1).unwrap().get(0, n))).collect();
        let again = forward(&w, &[7], &AblationSpec::override_neurons(1, vals), &TraceRequest::default()).unwrap();
        assert_eq!(again.hidden, one.hidden);
        assert_eq!(h.rows(), 3);
    }

    #[test]
    fn ablation_validation() {
        let cfg = tiny_config();
        assert!(AblationSpec::zero_mlp(cfg.n_layer).validate(&cfg).is_err());
        assert!(AblationSpec::scale_h(0, 1.5).validate(&cfg).is_err());
        let both = AblationSpec { zero_mlp_at_layer: Some(1), scale_h: Some((1, 0.5)), ..AblationSpec::default() };
        assert!(both.validate(&cfg).is_err());
        let overlap = AblationSpec {
            zero_neurons: Some((1, alloc::vec![3])),
            override_neurons: Some((1, alloc::vec![(3, 1.0)])),
            ..AblationSpec::default()
        };
        assert!(overlap.validate(&cfg).is_err());
        assert!(AblationSpec::zero_neurons(0, alloc::vec![cfg.d_mlp]).validate(&cfg).is_err());
    }

    #[test]
    fn input_errors() {
        let w = model();
        let long: Vec<u32> = (0..=w.config.n_ctx as u32).map(|i| i % 5).collect();
        assert_eq!(
            forward(&w, &long, &AblationSpec::none(), &TraceRequest::default()).unwrap_err(),
            Error::SequenceTooLong { len: w.config.n_ctx + 1, max: w.config.n_ctx }
        );
        assert!(matches!(
            forward(&w, &[99], &AblationSpec::none(), &TraceRequest::default()),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn per_head_outputs_sum_to_fused_attention() {
        let w = model();
        let t = forward(&w, &[1, 2, 3, 4, 5, 6], &AblationSpec::none(), &TraceRequest::block_boundaries(&w.config)).unwrap();
        let resid = t.residual_post_block(0).unwrap();
        let (fused, heads) = head_contributions(&w, 1, resid);
        let mut sum = Matrix::zeros(fused.rows(), fused.cols());
        for h in &heads {
            sum.add_assign(h);
        }
        sum.add_row_vector(&w.blocks[1].b_attn_out);
        for (a, b) in sum.as_slice().iter().zip(fused.as_slice()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    struct Uniform(usize);

    impl NextTokenScorer for Uniform {
        fn next_token_log_probs(&self, tokens: &[u32]) -> Result<Vec<f32>> {
            Ok(alloc::vec![-libm::logf(self.0 as f32); tokens.len() - 1])
        }
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let ppl = perplexity(&Uniform(50257), &[alloc::vec![1, 2, 3], alloc::vec![4, 5]]).unwrap();
        assert!((ppl - 50257.0).abs() / 50257.0 < 1e-5);
        assert!(perplexity(&Uniform(10), &[]).is_err());
    }

    #[test]
    fn gpt2_scorer_matches_full_logits() {
        let w = model();
        let toks = [3u32, 1, 4, 1, 5, 9];
        let lps = Gpt2Scorer { weights: &w, ablation: &AblationSpec::none() }.next_token_log_probs(&toks).unwrap();
        let t = forward(&w, &toks, &AblationSpec::none(), &TraceRequest::logits()).unwrap();
        let logits = t.logits.unwrap();
        for (i, lp) in lps.iter().enumerate() {
            let row = logits.row(i);
            let want = row[toks[i + 1] as usize] - log_sum_exp(row);
            assert!((lp - want).abs() < 1e-6);
        }
    }
}
