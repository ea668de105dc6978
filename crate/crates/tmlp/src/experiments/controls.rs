//! Untrained-model null and firing-threshold robustness.

use tmlp_core::linalg::{gelu, Matrix};
use tmlp_core::model::{forward, AblationSpec, ModelWeights, TraceRequest};
use tmlp_core::stats::{consensus_levels, fisher_enrichment, FiringMatrix, Mask, TokenMeta};
use tmlp_core::{Tier, TierPartition};

use super::Context;
use crate::error::Result;
use crate::report::{columns, ExperimentReport};

/// Levels with fewer tokens than this are left out of the spread.
pub const MIN_LEVEL_TOKENS: usize = 100;

/// Regime rate at each consensus level, `None` for levels with fewer than
/// `min_tokens` tokens.
pub fn regime_rate_by_level(levels: &[u8], regime: &Mask, max_level: usize, min_tokens: usize) -> Vec<Option<f64>> {
    let mut n = vec![0usize; max_level + 1];
    let mut hit = vec![0usize; max_level + 1];
    for (t, &l) in levels.iter().enumerate() {
        n[l as usize] += 1;
        hit[l as usize] += regime.get(t) as usize;
    }
    n.iter().zip(&hit).map(|(&n, &h)| (n >= min_tokens && n > 0).then(|| h as f64 / n as f64)).collect()
}

/// Largest minus smallest regime rate across the populated consensus
/// levels, as a fraction.
pub fn anticorrelation_spread(levels: &[u8], regime: &Mask, max_level: usize, min_tokens: usize) -> Option<f64> {
    let rates: Vec<f64> = regime_rate_by_level(levels, regime, max_level, min_tokens).into_iter().flatten().collect();
    if rates.len() < 2 {
        return None;
    }
    let hi = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
    Some(hi - lo)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub theta: f32,
    pub core_min_jaccard: f64,
    pub core_max_jaccard: f64,
    pub spread: Option<f64>,
}

/// Pre-GELU activations of the routing neurons, one row per token.
struct Routing {
    neurons: Vec<usize>,
    x: Matrix,
    meta: Vec<TokenMeta>,
}

impl Routing {
    fn local(&self, neuron: usize) -> usize {
        self.neurons.iter().position(|&n| n == neuron).expect("routing neuron")
    }

    fn locals(&self, neurons: &[usize]) -> Vec<usize> {
        neurons.iter().map(|&n| self.local(n)).collect()
    }

    fn firing(&self, theta: f32) -> Result<FiringMatrix> {
        Ok(FiringMatrix::from_activations(&self.x, &self.meta, theta)?)
    }

    fn regime(&self, exception: usize, threshold: f32) -> Mask {
        let c = self.local(exception);
        Mask::from_bools((0..self.x.rows()).map(|r| gelu(self.x.get(r, c)) > threshold))
    }
}

fn collect_routing(ctx: &Context, w: &ModelWeights, seqs: &[Vec<u32>]) -> Result<Routing> {
    let layer = w.config.last_layer();
    let neurons = ctx.partition.routing_neurons();
    let per_seq = ctx.par_map(seqs, |s, tokens| {
        let trace = forward(w, tokens, &AblationSpec::none(), &TraceRequest { mlp_activations: vec![layer], ..Default::default() })?;
        let x = trace.mlp_pre(layer)?;
        let mut rows = Vec::with_capacity(x.rows() * neurons.len());
        for r in 0..x.rows() {
            rows.extend(neurons.iter().map(|&n| x.get(r, n)));
        }
        let meta: Vec<TokenMeta> =
            tokens.iter().enumerate().map(|(p, &t)| TokenMeta { sequence: s as u32, position: p as u32, token: t }).collect();
        Ok((rows, meta))
    })?;
    let mut data = Vec::new();
    let mut meta = Vec::new();
    for (d, m) in per_seq {
        data.extend(d);
        meta.extend(m);
    }
    let x = Matrix::from_vec(meta.len(), neurons.len(), data)?;
    Ok(Routing { neurons, x, meta })
}

fn pair_range(f: &FiringMatrix, cols: &[usize]) -> (f64, f64) {
    let j = f.pairwise_jaccard(cols);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for a in 0..cols.len() {
        for b in a + 1..cols.len() {
            lo = lo.min(j[a][b]);
            hi = hi.max(j[a][b]);
        }
    }
    (lo, hi)
}

/// Null-model metrics for one set of weights.
struct Profile {
    exception_rate: f64,
    regime_rate: f64,
    core_max_jaccard: f64,
    spread: Option<f64>,
    max_enrichment: Option<f64>,
    significant: usize,
    rates: Vec<Option<f64>>,
}

fn profile(r: &Routing, part: &TierPartition, theta: f32, threshold: f32) -> Result<Profile> {
    let f = r.firing(theta)?;
    let regime = r.regime(part.exception_neuron(), threshold);
    let consensus = r.locals(part.consensus());
    let levels = consensus_levels(&f, &consensus);
    let exc = r.local(part.exception_neuron());
    let handler: Vec<usize> = r.locals(&part.exception_handler());
    let mut max_enrichment: Option<f64> = None;
    let mut significant = 0;
    if regime.count() > 0 {
        for &n in handler.iter().filter(|&&n| n != exc) {
            let e = fisher_enrichment(&f, &regime, n);
            significant += e.significant as usize;
            if let Some(v) = e.enrichment {
                max_enrichment = Some(max_enrichment.map_or(v, |m| m.max(v)));
            }
        }
    }
    Ok(Profile {
        exception_rate: f.fire_rate(exc),
        regime_rate: regime.count() as f64 / f.tokens() as f64,
        core_max_jaccard: pair_range(&f, &r.locals(part.tier(Tier::Core))).1,
        spread: anticorrelation_spread(&levels, &regime, consensus.len(), MIN_LEVEL_TOKENS),
        max_enrichment,
        significant,
        rates: regime_rate_by_level(&levels, &regime, consensus.len(), MIN_LEVEL_TOKENS),
    })
}

pub(super) fn run(ctx: &Context) -> Result<ExperimentReport> {
    let w = ctx.weights()?;
    let part = &ctx.partition;
    let seqs = ctx.sequences(ctx.config.survey_sequences)?;
    let (theta, threshold) = (ctx.config.theta, ctx.config.exception_threshold);
    let trained = collect_routing(ctx, w, seqs)?;
    let random = {
        let rw = ModelWeights::random_init(w.config, ctx.config.control_seed);
        collect_routing(ctx, &rw, seqs)?
    };
    let t = profile(&trained, part, theta, threshold)?;
    let u = profile(&random, part, theta, threshold)?;

    let mut r = ExperimentReport::new(
        "controls",
        columns(&[
            ("section", "", "null: trained vs random-init metric; sweep: trained weights at each theta"),
            ("key", "", "metric name or theta"),
            ("trained", "", ""),
            ("random_init", "", ""),
            ("core_min_jaccard", "", "sweep rows only"),
            ("core_max_jaccard", "", "sweep rows only"),
            ("spread", "fraction", "sweep rows only: max − min regime rate over consensus levels"),
        ]),
    );
    let null_row = |key: &str, a: crate::report::Cell, b: crate::report::Cell| {
        vec!["null".into(), key.into(), a, b, crate::report::Cell::Null, crate::report::Cell::Null, crate::report::Cell::Null]
    };
    r.push(null_row("exception_fire_rate", t.exception_rate.into(), u.exception_rate.into()));
    r.push(null_row("exception_regime_rate", t.regime_rate.into(), u.regime_rate.into()));
    r.push(null_row("core_max_jaccard", t.core_max_jaccard.into(), u.core_max_jaccard.into()));
    r.push(null_row("anticorrelation_spread", t.spread.into(), u.spread.into()));
    r.push(null_row("max_handler_enrichment", t.max_enrichment.into(), u.max_enrichment.into()));
    r.push(null_row("significant_handler_neurons", t.significant.into(), u.significant.into()));
    for (l, (a, b)) in t.rates.iter().zip(&u.rates).enumerate() {
        r.push(null_row(&format!("regime_rate_level_{l}"), (*a).into(), (*b).into()));
    }
    let core = trained.locals(part.tier(Tier::Core));
    let consensus = trained.locals(part.consensus());
    let regime = trained.regime(part.exception_neuron(), threshold);
    let mut sweep = Vec::new();
    for &th in &ctx.config.sweep_thetas {
        let f = trained.firing(th)?;
        let (lo, hi) = pair_range(&f, &core);
        let levels = consensus_levels(&f, &consensus);
        let p = SweepPoint {
            theta: th,
            core_min_jaccard: lo,
            core_max_jaccard: hi,
            spread: anticorrelation_spread(&levels, &regime, consensus.len(), MIN_LEVEL_TOKENS),
        };
        r.push(vec![
            "sweep".into(),
            format!("{th}").into(),
            crate::report::Cell::Null,
            crate::report::Cell::Null,
            p.core_min_jaccard.into(),
            p.core_max_jaccard.into(),
            p.spread.into(),
        ]);
        sweep.push(p);
    }
    r.set("sequences", seqs.len());
    r.set("tokens", trained.meta.len());
    r.set("control_seed", ctx.config.control_seed);
    r.set("trained_spread", t.spread);
    r.set("random_spread", u.spread);
    r.set("trained_core_max_jaccard", t.core_max_jaccard);
    r.set("random_core_max_jaccard", u.core_max_jaccard);
    r.set("random_exception_fire_rate", u.exception_rate);
    r.set("random_max_enrichment", u.max_enrichment);
    r.set("sweep_min_core_jaccard", sweep.iter().map(|p| p.core_min_jaccard).fold(f64::INFINITY, f64::min));
    r.set("sweep_min_spread", sweep.iter().filter_map(|p| p.spread).fold(f64::INFINITY, f64::min));
    r.set("sweep_all_spreads_defined", sweep.iter().all(|p| p.spread.is_some()));
    r.note(format!(
        "random init: normal(0, {}) weight matrices, zero biases, unit layernorm scales, seeded by control_seed",
        tmlp_core::model::INIT_STD
    ));
    r.note(format!("spread uses consensus levels with at least {MIN_LEVEL_TOKENS} tokens; the exception regime keeps its fixed threshold across the sweep"));
    r.note("Core-analog neurons are the canonical Core indices read from the untrained model");
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_skips_sparse_levels() {
        // level 0: 4 tokens all in regime; level 1: 4 tokens none; level 2: 1 token
        let levels = [0, 0, 0, 0, 1, 1, 1, 1, 2];
        let regime = Mask::from_bools([true, true, true, true, false, false, false, false, true]);
        assert_eq!(anticorrelation_spread(&levels, &regime, 2, 2), Some(1.0));
        assert_eq!(regime_rate_by_level(&levels, &regime, 2, 2), vec![Some(1.0), Some(0.0), None]);
        assert_eq!(anticorrelation_spread(&levels, &regime, 2, 5), None);
    }
}
