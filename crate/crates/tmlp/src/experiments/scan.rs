//! One pass over the corpus at the final layer, shared by the routing
//! experiments.

use tmlp_core::decomposition::tier_outputs;
use tmlp_core::linalg::{gelu, norm};
use tmlp_core::model::{forward, mlp_project, resume_from_mlp, target_log_probs, AblationSpec, TraceRequest};
use tmlp_core::stats::{consensus_levels, FiringMatrix, Mask, TokenMeta};
use tmlp_core::Tier;

use super::Context;
use crate::error::Result;

/// Forward variants scored on the perplexity slice, in column order.
pub const VARIANTS: [&str; 6] = ["full", "zero_mlp", "core", "differentiators", "specialists", "all_20"];

pub struct Scan {
    pub layer: usize,
    pub firing: FiringMatrix,
    /// Signed GELU output of the exception neuron per token.
    pub exception: Vec<f32>,
    pub regime: Mask,
    pub levels: Vec<u8>,
    /// First row of each sequence in the token-level arrays.
    pub offsets: Vec<usize>,
    /// Per perplexity-slice sequence, per variant: `ln P(tokens[t + 1])`.
    pub log_probs: Vec<[Vec<f32>; 6]>,
    /// Output norms of Core, Differentiators, Specialists and Residual (with
    /// bias) per token.
    pub tier_norms: Vec<[f32; 4]>,
    /// Sum of the MLP output vectors per consensus level, and token counts.
    pub level_output_sum: Vec<Vec<f64>>,
    pub level_counts: Vec<u64>,
    /// Per head of the final layer: attention weight on position 0 per token.
    pub bos: Vec<Vec<f32>>,
}

struct SeqScan {
    firing: FiringMatrix,
    exception: Vec<f32>,
    log_probs: Option<[Vec<f32>; 6]>,
    tier_norms: Vec<[f32; 4]>,
    level_output_sum: Vec<Vec<f64>>,
    level_counts: Vec<u64>,
    bos: Vec<Vec<f32>>,
}

pub(super) fn run(ctx: &Context) -> Result<Scan> {
    let w = ctx.weights()?;
    let cfg = &w.config;
    let seqs = ctx.sequences(ctx.config.sequence_count)?;
    let layer = cfg.last_layer();
    let part = &ctx.partition;
    let exc = part.exception_neuron();
    let consensus = part.consensus().to_vec();
    let theta = ctx.config.theta;
    let ppl = ctx.config.ppl_sequences;
    let ablations = [
        AblationSpec::zero_mlp(layer),
        AblationSpec::zero_neurons(layer, part.tier(Tier::Core).to_vec()),
        AblationSpec::zero_neurons(layer, part.tier(Tier::Differentiators).to_vec()),
        AblationSpec::zero_neurons(layer, part.tier(Tier::Specialists).to_vec()),
        AblationSpec::zero_neurons(layer, part.exception_handler()),
    ];
    let request = TraceRequest {
        attention: (0..cfg.n_head).map(|h| (layer, h)).collect(),
        ..TraceRequest::mlp_layer(layer)
    };
    log::info!("scanning {} sequences at layer {layer}", seqs.len());
    let per_seq = ctx.par_map(seqs, |s, tokens| {
        let trace = forward(w, tokens, &AblationSpec::none(), &request)?;
        let x = trace.mlp_pre(layer)?;
        let h = trace.mlp_post(layer)?;
        let meta: Vec<TokenMeta> = tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| TokenMeta { sequence: s as u32, position: p as u32, token: t })
            .collect();
        let firing = FiringMatrix::from_activations(x, &meta, theta)?;
        let exception: Vec<f32> = (0..x.rows()).map(|r| gelu(x.get(r, exc))).collect();
        let log_probs = if s < ppl {
            let resid = trace.residual_pre_mlp(layer)?;
            let targets = &tokens[1..];
            let full = target_log_probs(w, &trace.hidden, targets);
            let mut out: [Vec<f32>; 6] = Default::default();
            out[0] = full;
            for (slot, a) in out[1..].iter_mut().zip(&ablations) {
                let hidden = resume_from_mlp(w, layer, resid, h, a)?;
                *slot = target_log_probs(w, &hidden, targets);
            }
            Some(out)
        } else {
            None
        };
        let blk = &w.blocks[layer];
        let tiers = tier_outputs(blk, part, h);
        let tier_norms = (0..h.rows())
            .map(|r| [norm(tiers[0].row(r)), norm(tiers[1].row(r)), norm(tiers[2].row(r)), norm(tiers[3].row(r))])
            .collect();
        let out = mlp_project(blk, h);
        let levels = consensus_levels(&firing, &consensus);
        let mut level_output_sum = vec![vec![0.0f64; cfg.d_model]; consensus.len() + 1];
        let mut level_counts = vec![0u64; consensus.len() + 1];
        for (r, &l) in levels.iter().enumerate() {
            level_counts[l as usize] += 1;
            for (a, &v) in level_output_sum[l as usize].iter_mut().zip(out.row(r)) {
                *a += v as f64;
            }
        }
        let bos = (0..cfg.n_head).map(|hd| trace.attention[&(layer, hd)].column(0)).collect();
        Ok(SeqScan { firing, exception, log_probs, tier_norms, level_output_sum, level_counts, bos })
    })?;

    let mut firing = FiringMatrix::new(cfg.d_mlp, theta);
    let mut scan = Scan {
        layer,
        firing: FiringMatrix::new(cfg.d_mlp, theta),
        exception: Vec::new(),
        regime: Mask::default(),
        levels: Vec::new(),
        offsets: Vec::new(),
        log_probs: Vec::new(),
        tier_norms: Vec::new(),
        level_output_sum: vec![vec![0.0; cfg.d_model]; consensus.len() + 1],
        level_counts: vec![0; consensus.len() + 1],
        bos: vec![Vec::new(); cfg.n_head],
    };
    for s in per_seq {
        scan.offsets.push(firing.tokens());
        firing.append(&s.firing)?;
        scan.exception.extend(s.exception);
        if let Some(lp) = s.log_probs {
            scan.log_probs.push(lp);
        }
        scan.tier_norms.extend(s.tier_norms);
        for (acc, v) in scan.level_output_sum.iter_mut().zip(&s.level_output_sum) {
            for (a, b) in acc.iter_mut().zip(v) {
                *a += b;
            }
        }
        for (a, b) in scan.level_counts.iter_mut().zip(&s.level_counts) {
            *a += b;
        }
        for (a, b) in scan.bos.iter_mut().zip(s.bos) {
            a.extend(b);
        }
    }
    let threshold = ctx.config.exception_threshold;
    scan.regime = Mask::from_bools(scan.exception.iter().map(|&v| v > threshold));
    scan.levels = consensus_levels(&firing, &consensus);
    scan.firing = firing;
    Ok(scan)
}

impl Scan {
    /// Token rows of sequence `s`.
    pub fn rows(&self, s: usize) -> std::ops::Range<usize> {
        let end = self.offsets.get(s + 1).copied().unwrap_or(self.firing.tokens());
        self.offsets[s]..end
    }
}
