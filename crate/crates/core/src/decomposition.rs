//! Exact tier decomposition of the final MLP and progressive accumulation of
//! its neurons.
//!
//! The MLP output `h · W_proj + b_proj` is a sum over neurons, so splitting
//! the neuron indices into disjoint tiers splits the output into tier terms
//! that add back up to it. The output bias belongs to the residual tier.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{input, Error, Result};
use crate::linalg::{argmax, cosine, layer_norm, rank_of, Matrix};
use crate::model::{forward, mlp_project, unembed, AblationSpec, Block, ModelWeights, TraceRequest};

pub const EXCEPTION_NEURON: usize = 2123;
pub const CORE: [usize; 5] = [2123, 2910, 740, 1611, 2044];
pub const DIFFERENTIATORS: [usize; 10] = [2462, 2173, 1602, 1800, 2379, 1715, 611, 3066, 584, 2378];
pub const SPECIALISTS: [usize; 5] = [2921, 2709, 971, 2679, 737];
pub const CONSENSUS: [usize; 7] = [2, 2361, 2460, 2928, 1831, 1245, 2600];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tier {
    Core,
    Differentiators,
    Specialists,
    Residual,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::Core, Tier::Differentiators, Tier::Specialists, Tier::Residual];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Core => "core",
            Tier::Differentiators => "differentiators",
            Tier::Specialists => "specialists",
            Tier::Residual => "residual",
        }
    }
}

/// Disjoint cover of the MLP neurons by the four tiers, plus the consensus
/// set (which is not a tier and may overlap the residual tier).
#[derive(Clone, Debug, PartialEq)]
pub struct TierPartition {
    d_mlp: usize,
    core: Vec<usize>,
    differentiators: Vec<usize>,
    specialists: Vec<usize>,
    residual: Vec<usize>,
    consensus: Vec<usize>,
    exception: usize,
}

impl TierPartition {
    /// The named neurons of GPT-2 Small's last MLP.
    pub fn canonical() -> Self {
        Self::new(3072, &CORE, &DIFFERENTIATORS, &SPECIALISTS, &CONSENSUS, EXCEPTION_NEURON)
            .expect("canonical partition is valid")
    }

    /// Builds a partition; the residual tier is the complement of the three
    /// named tiers. `exception` must be a core neuron.
    pub fn new(
        d_mlp: usize,
        core: &[usize],
        differentiators: &[usize],
        specialists: &[usize],
        consensus: &[usize],
        exception: usize,
    ) -> Result<Self> {
        let mut owner: Vec<Option<Tier>> = vec![None; d_mlp];
        for (tier, set) in [(Tier::Core, core), (Tier::Differentiators, differentiators), (Tier::Specialists, specialists)] {
            for &n in set {
                let slot = owner
                    .get_mut(n)
                    .ok_or_else(|| Error::Partition(format!("neuron {n} outside 0..{d_mlp}")))?;
                if let Some(prev) = slot {
                    return Err(Error::Partition(format!(
                        "neuron {n} assigned to both {} and {}",
                        prev.name(),
                        tier.name()
                    )));
                }
                *slot = Some(tier);
            }
        }
        let mut seen = vec![false; d_mlp];
        for &n in consensus {
            if n >= d_mlp || core.contains(&n) || differentiators.contains(&n) || specialists.contains(&n) {
                return Err(Error::Partition(format!("consensus neuron {n} is out of range or in a named tier")));
            }
            if core::mem::replace(&mut seen[n], true) {
                return Err(Error::Partition(format!("consensus neuron {n} listed twice")));
            }
        }
        if !core.contains(&exception) {
            return Err(Error::Partition(format!("exception neuron {exception} is not in the core tier")));
        }
        let residual = (0..d_mlp).filter(|&n| owner[n].is_none()).collect();
        Ok(Self {
            d_mlp,
            core: core.to_vec(),
            differentiators: differentiators.to_vec(),
            specialists: specialists.to_vec(),
            residual,
            consensus: consensus.to_vec(),
            exception,
        })
    }

    pub fn d_mlp(&self) -> usize {
        self.d_mlp
    }

    pub fn tier(&self, tier: Tier) -> &[usize] {
        match tier {
            Tier::Core => &self.core,
            Tier::Differentiators => &self.differentiators,
            Tier::Specialists => &self.specialists,
            Tier::Residual => &self.residual,
        }
    }

    pub fn consensus(&self) -> &[usize] {
        &self.consensus
    }

    pub fn exception_neuron(&self) -> usize {
        self.exception
    }

    /// Core, differentiators and specialists (20 neurons in the canonical set).
    pub fn exception_handler(&self) -> Vec<usize> {
        [&self.core, &self.differentiators, &self.specialists].into_iter().flatten().copied().collect()
    }

    /// Exception handler plus consensus neurons (27 in the canonical set).
    pub fn routing_neurons(&self) -> Vec<usize> {
        let mut v = self.exception_handler();
        v.extend_from_slice(&self.consensus);
        v
    }

    pub fn tier_of(&self, neuron: usize) -> Tier {
        [Tier::Core, Tier::Differentiators, Tier::Specialists]
            .into_iter()
            .find(|t| self.tier(*t).contains(&neuron))
            .unwrap_or(Tier::Residual)
    }
}

/// `Σ_{n ∈ tier} h_n · W_proj[n, :]`, plus `b_proj` when `include_bias`.
pub fn tier_output(block: &Block, h: &[f32], tier: &[usize], include_bias: bool) -> Vec<f32> {
    let d = block.b_proj.len();
    let mut out = if include_bias { block.b_proj.clone() } else { vec![0.0; d] };
    for &n in tier {
        let hn = h[n];
        for (o, w) in out.iter_mut().zip(block.w_proj.row(n)) {
            *o += hn * w;
        }
    }
    out
}

/// Tier outputs for every row of `h` in [`Tier::ALL`] order, each computed
/// as a product of the gathered activation columns with the gathered
/// `W_proj` rows. The bias goes to the residual tier.
pub fn tier_outputs(block: &Block, partition: &TierPartition, h: &Matrix) -> [Matrix; 4] {
    Tier::ALL.map(|tier| {
        let idx = partition.tier(tier);
        let mut hs = Matrix::zeros(h.rows(), idx.len());
        for r in 0..h.rows() {
            let src = h.row(r);
            for (dst, &n) in hs.row_mut(r).iter_mut().zip(idx) {
                *dst = src[n];
            }
        }
        let ws = Matrix::from_rows(&idx.iter().map(|&n| block.w_proj.row(n)).collect::<Vec<_>>())
            .unwrap_or_else(|_| Matrix::zeros(0, block.b_proj.len()));
        let mut out = if idx.is_empty() { Matrix::zeros(h.rows(), block.b_proj.len()) } else { hs.matmul(&ws) };
        if tier == Tier::Residual {
            out.add_row_vector(&block.b_proj);
        }
        out
    })
}

/// Agreement between the tier sum and the direct MLP output at one token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reconstruction {
    pub max_abs_diff: f32,
    pub cosine: f64,
}

/// Runs the MLP on input `x` (the second layernorm's output) both directly
/// and as Core + Differentiators + Specialists + Residual(with bias).
pub fn reconstruct_check(block: &Block, partition: &TierPartition, x: &[f32]) -> Reconstruction {
    let xm = Matrix::from_vec(1, x.len(), x.to_vec()).expect("row");
    let mut pre = xm.matmul(&block.w_fc);
    pre.add_row_vector(&block.b_fc);
    pre.map_inplace(crate::linalg::gelu);
    let direct = mlp_project(block, &pre);
    let tiers = tier_outputs(block, partition, &pre);
    compare_rows(&tiers, &direct).remove(0)
}

/// Per-row reconstruction metrics of precomputed tier outputs against the
/// direct MLP output.
pub fn compare_rows(tiers: &[Matrix; 4], direct: &Matrix) -> Vec<Reconstruction> {
    (0..direct.rows())
        .map(|r| {
            let sum: Vec<f32> =
                (0..direct.cols()).map(|j| tiers.iter().map(|t| t.get(r, j)).sum::<f32>()).collect();
            let max_abs_diff = sum.iter().zip(direct.row(r)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            Reconstruction { max_abs_diff, cosine: cosine(&sum, direct.row(r)) }
        })
        .collect()
}

/// Neuron indices by decreasing `|h_n| · ‖W_proj[n, :]‖₂`; ties keep
/// ascending index order.
pub fn activation_order(h: &[f32], column_norms: &[f32]) -> Vec<usize> {
    let score: Vec<f32> = h.iter().zip(column_norms).map(|(a, n)| a.abs() * n).collect();
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| score[b].partial_cmp(&score[a]).unwrap_or(core::cmp::Ordering::Equal));
    order
}

/// Neuron ordering and scaling used when accumulating MLP neurons.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccumulationMode {
    /// Each neuron contributes its unit-scaled output row `+W_proj[n, :]`,
    /// ordered by row norm alone. Independent of the prompt.
    Static,
    /// Each neuron contributes `h_n · W_proj[n, :]`, ordered by
    /// [`activation_order`].
    Context,
}

/// What the accumulated neurons are added to before reading the rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankBase {
    /// The partial MLP output alone, read through the final layernorm and
    /// unembedding.
    MlpOnly,
    /// The partial MLP output added to the pre-MLP residual. The full
    /// accumulation then reproduces the model's own rank.
    WithResidual,
}

/// Neuron counts at which trajectories are sampled.
pub const K_GRID: [usize; 12] = [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 3072];

#[derive(Clone, Debug, PartialEq)]
pub struct RankTrajectory {
    pub ks: Vec<usize>,
    /// Rank of the target after accumulating `ks[i]` neurons; the entry at
    /// `k = d_mlp` includes `b_proj`.
    pub ranks: Vec<usize>,
    /// Rank read from the pre-MLP residual (attention output, `k = 0`).
    pub pre_mlp_rank: usize,
    /// Rank in the model's actual output distribution.
    pub full_rank: usize,
    /// Minimum over `ranks`.
    pub best_rank: usize,
}

/// Rank of `target` at the last prompt position as neurons of the final MLP
/// are accumulated. Rank 1 is the argmax; ties go to the lower token id.
pub fn progressive_rank(
    weights: &ModelWeights,
    prompt: &[u32],
    target: u32,
    mode: AccumulationMode,
    base: RankBase,
) -> Result<RankTrajectory> {
    let cfg = &weights.config;
    if prompt.is_empty() {
        return Err(input("empty prompt"));
    }
    if target as usize >= cfg.n_vocab {
        return Err(Error::TokenOutOfRange { id: target, vocab: cfg.n_vocab });
    }
    let layer = cfg.last_layer();
    let blk = &weights.blocks[layer];
    let trace = forward(weights, prompt, &AblationSpec::none(), &TraceRequest { logits: true, ..TraceRequest::mlp_layer(layer) })?;
    let last = prompt.len() - 1;
    let resid = trace.residual_pre_mlp(layer)?.row(last);
    let h = trace.mlp_post(layer)?.row(last);
    let norms = weights.proj_column_norms(layer);

    let (order, coef): (Vec<usize>, Vec<f32>) = match mode {
        AccumulationMode::Context => (activation_order(h, &norms), h.to_vec()),
        AccumulationMode::Static => (activation_order(&vec![1.0; cfg.d_mlp], &norms), vec![1.0; cfg.d_mlp]),
    };
    let mut ks: Vec<usize> = K_GRID.iter().copied().filter(|&k| k < cfg.d_mlp).collect();
    ks.push(cfg.d_mlp);

    let mut rows = Matrix::zeros(ks.len() + 1, cfg.d_model);
    rows.row_mut(0).copy_from_slice(resid);
    let mut acc = match base {
        RankBase::MlpOnly => vec![0.0f32; cfg.d_model],
        RankBase::WithResidual => resid.to_vec(),
    };
    let mut next = 0;
    for (i, &n) in order.iter().enumerate() {
        for (a, w) in acc.iter_mut().zip(blk.w_proj.row(n)) {
            *a += coef[n] * w;
        }
        while next < ks.len() && ks[next] == i + 1 {
            let row = rows.row_mut(next + 1);
            row.copy_from_slice(&acc);
            if ks[next] == cfg.d_mlp {
                for (r, b) in row.iter_mut().zip(&blk.b_proj) {
                    *r += b;
                }
            }
            next += 1;
        }
    }
    let ln = &weights.ln_f;
    let logits = unembed(weights, &layer_norm(&rows, &ln.gamma, &ln.beta, cfg.ln_eps));
    let ranks: Vec<usize> = (1..rows.rows()).map(|r| rank_of(logits.row(r), target as usize)).collect();
    let full = trace.logits.as_ref().expect("logits traced");
    Ok(RankTrajectory {
        best_rank: *ranks.iter().min().expect("non-empty grid"),
        pre_mlp_rank: rank_of(logits.row(0), target as usize),
        full_rank: rank_of(full.row(last), target as usize),
        ks,
        ranks,
    })
}

/// Top-1 token at the last prompt position after each cumulative stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePredictions {
    /// Pre-MLP, +Core, +Differentiators, +Specialists, +Residual (with bias).
    pub top1: [u32; 5],
    /// Probability of the final-stage token at every stage.
    pub final_token_prob: [f32; 5],
}

pub fn progressive_prediction(weights: &ModelWeights, prompt: &[u32], partition: &TierPartition) -> Result<StagePredictions> {
    let cfg = &weights.config;
    if partition.d_mlp() != cfg.d_mlp {
        return Err(Error::Partition(format!("partition covers {} neurons, model has {}", partition.d_mlp(), cfg.d_mlp)));
    }
    if prompt.is_empty() {
        return Err(input("empty prompt"));
    }
    let layer = cfg.last_layer();
    let blk = &weights.blocks[layer];
    let trace = forward(weights, prompt, &AblationSpec::none(), &TraceRequest::mlp_layer(layer))?;
    let last = prompt.len() - 1;
    let h = trace.mlp_post(layer)?.slice_rows(last, last + 1);
    let tiers = tier_outputs(blk, partition, &h);
    let mut rows = Matrix::zeros(5, cfg.d_model);
    let mut acc = trace.residual_pre_mlp(layer)?.row(last).to_vec();
    rows.row_mut(0).copy_from_slice(&acc);
    for (i, t) in tiers.iter().enumerate() {
        for (a, v) in acc.iter_mut().zip(t.row(0)) {
            *a += v;
        }
        rows.row_mut(i + 1).copy_from_slice(&acc);
    }
    let ln = &weights.ln_f;
    let mut logits = unembed(weights, &layer_norm(&rows, &ln.gamma, &ln.beta, cfg.ln_eps));
    let top1: [u32; 5] = core::array::from_fn(|i| argmax(logits.row(i)) as u32);
    let fin = top1[4] as usize;
    let final_token_prob = core::array::from_fn(|i| {
        let row = logits.row_mut(i);
        crate::linalg::softmax_inplace(row);
        row[fin]
    });
    Ok(StagePredictions { top1, final_token_prob })
}
