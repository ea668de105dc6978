//! Routing experiments over the shared final-layer scan.

use std::collections::BTreeMap;

use tmlp_core::linalg::Matrix;
use tmlp_core::stats::{
    bimodal_threshold, bootstrap_ci_with, conditional_fire_rates, fisher_enrichment, fisher_enrichment_counts,
    independent_jaccard, BootstrapCI, Contingency, FiringMatrix, BONFERRONI_ALPHA,
};
use tmlp_core::Tier;

use super::scan::{Scan, VARIANTS};
use super::{mean, Context};
use crate::error::Result;
use crate::report::{columns, Cell, ExperimentReport};

/// Highest consensus level counted as low consensus.
pub const LOW_CONSENSUS_MAX: u8 = 4;

/// Minimum and maximum Jaccard over distinct pairs of `neurons`.
fn pair_range(f: &FiringMatrix, neurons: &[usize]) -> Option<(f64, f64)> {
    let mut out: Option<(f64, f64)> = None;
    for (i, &a) in neurons.iter().enumerate() {
        for &b in &neurons[i + 1..] {
            let j = f.jaccard(a, b);
            out = Some(out.map_or((j, j), |(lo, hi)| (lo.min(j), hi.max(j))));
        }
    }
    out
}

fn ci_cells(ci: Option<BootstrapCI>, scale: f64) -> (Cell, Cell) {
    match ci {
        Some(c) => ((c.lo * scale).into(), (c.hi * scale).into()),
        None => (Cell::Null, Cell::Null),
    }
}

fn bootstrap<F: Fn(&[usize]) -> Option<f64>>(ctx: &Context, units: usize, stat: F) -> Option<BootstrapCI> {
    let c = &ctx.config;
    bootstrap_ci_with(units, c.bootstrap_resamples, c.bootstrap_seed, c.confidence, stat).ok()
}

pub(super) fn tiers(ctx: &Context) -> Result<ExperimentReport> {
    let scan = ctx.scan()?;
    let part = &ctx.partition;
    let f = &scan.firing;
    let exc = part.exception_neuron();
    let mut r = ExperimentReport::new(
        "tiers",
        columns(&[
            ("neuron", "", ""),
            ("tier", "", "Core, Differentiators, Specialists or Consensus"),
            ("base_rate", "fraction", "P(fire) over all tokens"),
            ("regime_rate", "fraction", "P(fire | exception regime)"),
            ("enrichment", "ratio", "regime_rate / base_rate"),
            ("log10_p", "", "one-sided Fisher exact test, log10 of p"),
            ("significant", "", "p below 0.05 / 3072"),
            ("jaccard_exception", "", "Jaccard with the exception neuron at theta"),
        ]),
    );
    let regime_ok = scan.regime.count() > 0;
    let mut groups: Vec<(&str, Vec<usize>)> =
        [Tier::Core, Tier::Differentiators, Tier::Specialists].iter().map(|&t| (t.name(), part.tier(t).to_vec())).collect();
    groups.push(("Consensus", part.consensus().to_vec()));
    let mut tier_rates: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (name, neurons) in &groups {
        let rates = if regime_ok { conditional_fire_rates(f, &scan.regime, neurons)? } else { vec![f64::NAN; neurons.len()] };
        for (&n, &rate) in neurons.iter().zip(&rates) {
            let e = fisher_enrichment(f, &scan.regime, n);
            r.push(vec![
                n.into(),
                (*name).into(),
                e.base_rate.into(),
                rate.into(),
                e.enrichment.into(),
                e.log10_p.into(),
                e.significant.into(),
                f.jaccard(n, exc).into(),
            ]);
            tier_rates.entry(name).or_default().push(rate);
        }
    }
    r.set("tokens", f.tokens());
    r.set("theta", f.theta());
    r.set("exception_fire_rate", f.fire_rate(exc));
    r.set("regime_rate", scan.regime.count() as f64 / f.tokens().max(1) as f64);
    let values: Vec<f64> = scan.exception.iter().map(|&v| v as f64).collect();
    match bimodal_threshold(&values, ctx.config.bin_width) {
        Ok(t) => r.set("bimodal_threshold", t),
        Err(e) => {
            r.set("bimodal_threshold", Cell::Null);
            r.note(format!("exception neuron: {e}"));
        }
    }
    for (name, neurons) in &groups {
        let key = name.to_lowercase();
        if let Some((lo, hi)) = pair_range(f, neurons) {
            r.set(&format!("{key}_jaccard_min"), lo);
            r.set(&format!("{key}_jaccard_max"), hi);
        }
        if let Some(rates) = tier_rates.get(name) {
            let finite: Vec<f64> = rates.iter().copied().filter(|v| v.is_finite()).collect();
            if !finite.is_empty() {
                r.set(&format!("{key}_regime_rate_min"), finite.iter().copied().fold(f64::INFINITY, f64::min));
                r.set(&format!("{key}_regime_rate_max"), finite.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    let handler = part.exception_handler();
    let spec_max = part
        .tier(Tier::Specialists)
        .iter()
        .flat_map(|&s| handler.iter().filter(move |&&o| o != s).map(move |&o| (s, o)))
        .map(|(s, o)| f.jaccard(s, o))
        .fold(0.0, f64::max);
    r.set("specialists_max_jaccard_with_handler", spec_max);
    let core = part.tier(Tier::Core);
    let (pa, pb) = (f.fire_rate(core[0]), f.fire_rate(core[1]));
    r.set("core_independence_baseline", independent_jaccard(pa, pb));

    if regime_ok {
        let mut shares = [0.0f64; 4];
        let mut n = 0usize;
        for t in scan.regime.ones() {
            let norms = scan.tier_norms[t];
            let total: f64 = norms.iter().map(|&v| v as f64).sum();
            if total > 0.0 {
                for (s, &v) in shares.iter_mut().zip(&norms) {
                    *s += v as f64 / total;
                }
                n += 1;
            }
        }
        for (tier, s) in Tier::ALL.iter().zip(shares) {
            r.set(&format!("{}_norm_share", tier.name().to_lowercase()), s / n.max(1) as f64);
        }
    } else {
        r.note("exception regime is empty; conditional rates and norm shares undefined");
    }
    r.note("norm share: mean over exception-regime tokens of ||tier output|| / sum of the four tier output norms; the output bias belongs to the residual tier");
    r.note("differentiator Jaccard range is within-tier pairwise");
    Ok(r)
}

/// Per-sequence, per-level sums and counts of `value(seq, t)` over
/// predicting positions `t`.
fn by_level(scan: &Scan, value: impl Fn(usize, usize) -> f64) -> Vec<(Vec<f64>, Vec<u64>)> {
    let levels = scan.level_counts.len();
    (0..scan.log_probs.len())
        .map(|s| {
            let rows = scan.rows(s);
            let mut sums = vec![0.0; levels];
            let mut counts = vec![0u64; levels];
            for t in 0..scan.log_probs[s][0].len() {
                let l = scan.levels[rows.start + t] as usize;
                sums[l] += value(s, t);
                counts[l] += 1;
            }
            (sums, counts)
        })
        .collect()
}

pub(super) fn consensus_dp(ctx: &Context) -> Result<ExperimentReport> {
    let scan = ctx.scan()?;
    let per_seq = by_level(&scan, |s, t| {
        let lp = &scan.log_probs[s];
        (lp[0][t] as f64).exp() - (lp[1][t] as f64).exp()
    });
    let mut r = ExperimentReport::new(
        "consensus_dp",
        columns(&[
            ("level", "", "number of consensus neurons firing at the predicting position"),
            ("tokens", "count", ""),
            ("mean_dp", "probability", "P_full(next) − P_mlp_zeroed(next)"),
            ("ci_lo", "probability", "percentile bootstrap over sequences"),
            ("ci_hi", "probability", ""),
        ]),
    );
    let units = per_seq.len();
    let mut signs_ok = true;
    let mut excludes_zero = Vec::new();
    for l in 0..scan.level_counts.len() {
        let count: u64 = per_seq.iter().map(|(_, c)| c[l]).sum();
        if count == 0 {
            r.note(format!("level {l}: no tokens, row omitted"));
            continue;
        }
        let mean = per_seq.iter().map(|(s, _)| s[l]).sum::<f64>() / count as f64;
        let ci = bootstrap(ctx, units, |idx| {
            let (mut s, mut c) = (0.0, 0u64);
            for &i in idx {
                s += per_seq[i].0[l];
                c += per_seq[i].1[l];
            }
            (c > 0).then(|| s / c as f64)
        });
        if ci.is_some_and(|c| c.lo > 0.0 || c.hi < 0.0) {
            excludes_zero.push(l);
        }
        let want_positive = l as u8 <= LOW_CONSENSUS_MAX;
        signs_ok &= (mean > 0.0) == want_positive;
        let (lo, hi) = ci_cells(ci, 1.0);
        r.push(vec![l.into(), count.into(), mean.into(), lo, hi]);
    }
    r.set("sequences", units);
    r.set("sign_pattern_holds", signs_ok);
    r.set("levels_ci_excluding_zero", excludes_zero.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","));
    r.note("positions 0..n−2 of each window are scored; the level is read at the predicting position");
    Ok(r)
}

pub(super) fn tier_ablation(ctx: &Context) -> Result<ExperimentReport> {
    let scan = ctx.scan()?;
    let part = &ctx.partition;
    let nv = VARIANTS.len();
    // per sequence: (nll per variant, tokens), split by low/high consensus
    struct Seq {
        nll: [[f64; 6]; 3],
        n: [u64; 3],
    }
    let seqs: Vec<Seq> = (0..scan.log_probs.len())
        .map(|s| {
            let rows = scan.rows(s);
            let lp = &scan.log_probs[s];
            let mut q = Seq { nll: [[0.0; 6]; 3], n: [0; 3] };
            for t in 0..lp[0].len() {
                let band = if scan.levels[rows.start + t] <= LOW_CONSENSUS_MAX { 1 } else { 2 };
                for b in [0, band] {
                    q.n[b] += 1;
                    for v in 0..nv {
                        q.nll[b][v] -= lp[v][t] as f64;
                    }
                }
            }
            q
        })
        .collect();
    let ratio = |idx: &[usize], band: usize, v: usize| -> Option<f64> {
        let (mut d, mut n) = (0.0, 0u64);
        for &i in idx {
            d += seqs[i].nll[band][v] - seqs[i].nll[band][0];
            n += seqs[i].n[band];
        }
        (n > 0).then(|| (d / n as f64).exp() - 1.0)
    };
    let all: Vec<usize> = (0..seqs.len()).collect();
    let ppl = |v: usize| -> f64 {
        let (nll, n) = seqs.iter().fold((0.0, 0u64), |(a, b), q| (a + q.nll[0][v], b + q.n[0]));
        (nll / n.max(1) as f64).exp()
    };
    let mut r = ExperimentReport::new(
        "tier_ablation",
        columns(&[
            ("variant", "", "neurons zeroed at the final layer"),
            ("neurons", "count", ""),
            ("ppl", "", "perplexity over the scored positions"),
            ("delta_pct", "%", "relative perplexity change against baseline"),
            ("ci_lo_pct", "%", "percentile bootstrap over sequences"),
            ("ci_hi_pct", "%", ""),
            ("delta_low_consensus_pct", "%", "restricted to positions with consensus ≤ 4"),
            ("delta_high_consensus_pct", "%", "restricted to positions with consensus ≥ 5"),
        ]),
    );
    let sizes = [
        0,
        ctx.weights()?.config.d_mlp,
        part.tier(Tier::Core).len(),
        part.tier(Tier::Differentiators).len(),
        part.tier(Tier::Specialists).len(),
        part.exception_handler().len(),
    ];
    for v in 0..nv {
        let label = if v == 0 { "baseline" } else { VARIANTS[v] };
        if v == 0 {
            r.push(vec![label.into(), 0usize.into(), ppl(0).into(), Cell::Null, Cell::Null, Cell::Null, Cell::Null, Cell::Null]);
            continue;
        }
        let ci = bootstrap(ctx, seqs.len(), |idx| ratio(idx, 0, v));
        let (lo, hi) = ci_cells(ci, 100.0);
        r.push(vec![
            label.into(),
            sizes[v].into(),
            ppl(v).into(),
            ratio(&all, 0, v).map(|x| x * 100.0).into(),
            lo,
            hi,
            ratio(&all, 1, v).map(|x| x * 100.0).into(),
            ratio(&all, 2, v).map(|x| x * 100.0).into(),
        ]);
    }
    r.set("sequences", seqs.len());
    r.set("tokens", seqs.iter().map(|q| q.n[0]).sum::<u64>());
    r.set("baseline_ppl", ppl(0));
    Ok(r)
}

pub(super) fn bos_attention(ctx: &Context) -> Result<ExperimentReport> {
    let scan = ctx.scan()?;
    let mut r = ExperimentReport::new(
        "bos_attention",
        columns(&[
            ("head", "", "final-layer attention head"),
            ("mean_all", "fraction", "mean weight on position 0 over query positions ≥ 1"),
            ("mean_regime", "fraction", "exception-regime query tokens"),
            ("mean_other", "fraction", "remaining query tokens"),
        ]),
    );
    let first_rows: std::collections::BTreeSet<usize> = scan.offsets.iter().copied().collect();
    let queries: Vec<usize> = (0..scan.firing.tokens()).filter(|t| !first_rows.contains(t)).collect();
    for (h, col) in scan.bos.iter().enumerate() {
        let all = mean(queries.iter().map(|&t| col[t] as f64));
        let reg = mean(queries.iter().filter(|&&t| scan.regime.get(t)).map(|&t| col[t] as f64));
        let oth = mean(queries.iter().filter(|&&t| !scan.regime.get(t)).map(|&t| col[t] as f64));
        r.push(vec![h.into(), all.into(), reg.into(), oth.into()]);
        if h == 7 {
            r.set("head7_mean_all", all);
            r.set("head7_mean_regime", reg);
            r.set("head7_mean_other", oth);
        }
    }
    r.note("head importance ranking is not computed");
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReidThresholds {
    pub min_rate: f64,
    pub min_class_ratio: f64,
    pub min_cosine: f64,
    /// Occurrences a token id needs to count as a class.
    pub min_class_tokens: u64,
}

impl Default for ReidThresholds {
    fn default() -> Self {
        Self { min_rate: 0.75, min_class_ratio: 10.0, min_cosine: 0.4, min_class_tokens: 50 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReidRow {
    pub neuron: usize,
    pub rate: f64,
    /// Most-enriched and most-depleted significant classes with their
    /// enrichment ratios.
    pub enriched: Option<(u32, f64)>,
    pub depleted: Option<(u32, f64)>,
    pub class_criterion: bool,
    pub cosine: f64,
    pub selected: bool,
}

/// Applies the three consensus criteria to every neuron. Rows are returned
/// for neurons passing the rate criterion.
pub fn reidentify(f: &FiringMatrix, direction: &[f64], w_proj: &Matrix, t: &ReidThresholds) -> Vec<ReidRow> {
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for m in f.meta() {
        *counts.entry(m.token).or_default() += 1;
    }
    let classes: Vec<(u32, u64)> = counts.into_iter().filter(|&(_, c)| c >= t.min_class_tokens).collect();
    let index: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &(tok, _))| (tok, i)).collect();
    let row_class: Vec<Option<usize>> = f.meta().iter().map(|m| index.get(&m.token).copied()).collect();
    let total = f.tokens() as u64;
    let dnorm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = Vec::new();
    for n in 0..f.neurons() {
        let rate = f.fire_rate(n);
        if !(rate > t.min_rate) {
            continue;
        }
        let fire = f.fire_count(n);
        let mut hits = vec![0u64; classes.len()];
        for r in f.column(n).ones() {
            if let Some(c) = row_class[r] {
                hits[c] += 1;
            }
        }
        let (mut enriched, mut depleted): (Option<(u32, f64)>, Option<(u32, f64)>) = (None, None);
        for (c, &(tok, size)) in classes.iter().enumerate() {
            let a = hits[c];
            let table = Contingency { a, b: fire - a, c: size - a, d: total + a - fire - size };
            let e = fisher_enrichment_counts(table);
            let ratio = e.enrichment.unwrap_or(0.0);
            if e.significant && enriched.is_none_or(|(_, r)| ratio > r) {
                enriched = Some((tok, ratio));
            }
            if table.ln_lower_tail() < BONFERRONI_ALPHA.ln() && depleted.is_none_or(|(_, r)| ratio < r) {
                depleted = Some((tok, ratio));
            }
        }
        let class_criterion = match (enriched, depleted) {
            (Some((_, hi)), Some((_, lo))) => lo == 0.0 || hi / lo > t.min_class_ratio,
            _ => false,
        };
        let row = w_proj.row(n);
        let rn = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let dot: f64 = row.iter().zip(direction).map(|(&a, b)| a as f64 * b).sum();
        let cosine = if rn > 0.0 && dnorm > 0.0 { dot / (rn * dnorm) } else { 0.0 };
        out.push(ReidRow {
            neuron: n,
            rate,
            enriched,
            depleted,
            class_criterion,
            cosine,
            selected: class_criterion && cosine > t.min_cosine,
        });
    }
    out
}

fn row_cosine(m: &Matrix, a: usize, b: &[f64]) -> f64 {
    let ra = m.row(a);
    let dot: f64 = ra.iter().zip(b).map(|(&x, y)| x as f64 * y).sum();
    let na = ra.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub(super) fn consensus_reid(ctx: &Context) -> Result<ExperimentReport> {
    let scan = ctx.scan()?;
    let w = ctx.weights()?;
    let w_proj = &w.blocks[scan.layer].w_proj;
    let consensus = ctx.partition.consensus().to_vec();
    let top = consensus.len();
    let high = top.saturating_sub(1);
    let mut direction = vec![0.0f64; w.config.d_model];
    let mut n = 0u64;
    for l in high..=top {
        n += scan.level_counts[l];
        for (d, v) in direction.iter_mut().zip(&scan.level_output_sum[l]) {
            *d += v;
        }
    }
    for d in &mut direction {
        *d /= n.max(1) as f64;
    }
    let rows = reidentify(&scan.firing, &direction, w_proj, &ReidThresholds::default());
    let vocab = ctx.vocab.as_ref();
    let label = |tok: u32| -> Cell {
        vocab.and_then(|v| v.decode(&[tok]).ok()).map_or(Cell::Int(tok as i64), Cell::Text)
    };
    let mut r = ExperimentReport::new(
        "consensus_reid",
        columns(&[
            ("neuron", "", "neurons firing on more than 75% of tokens"),
            ("fire_rate", "fraction", ""),
            ("enriched_class", "", "most-enriched significant token class"),
            ("enriched_ratio", "ratio", "class fire rate / overall fire rate"),
            ("depleted_class", "", "most-depleted significant token class"),
            ("depleted_ratio", "ratio", ""),
            ("class_criterion", "", "enriched / depleted ratio above 10"),
            ("cosine", "", "cos(output row, mean MLP output at the two highest consensus levels)"),
            ("selected", "", "all three criteria"),
            ("canonical", "", "member of the canonical consensus set"),
        ]),
    );
    let mut recovered = Vec::new();
    for row in &rows {
        let canonical = consensus.contains(&row.neuron);
        if row.selected {
            recovered.push(row.neuron);
        }
        r.push(vec![
            row.neuron.into(),
            row.rate.into(),
            row.enriched.map_or(Cell::Null, |(t, _)| label(t)),
            row.enriched.map(|(_, x)| x).into(),
            row.depleted.map_or(Cell::Null, |(t, _)| label(t)),
            row.depleted.map(|(_, x)| x).into(),
            row.class_criterion.into(),
            row.cosine.into(),
            row.selected.into(),
            canonical.into(),
        ]);
    }
    let hits = consensus.iter().filter(|n| recovered.contains(n)).count();
    r.set("recovered", recovered.len());
    r.set("recovered_canonical", hits);
    r.set("recovered_set", recovered.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","));
    r.set("all_canonical_recovered", hits == consensus.len());

    // output-direction geometry of the canonical set
    let rows64: Vec<Vec<f64>> = consensus.iter().map(|&c| w_proj.row(c).iter().map(|&v| v as f64).collect()).collect();
    let cos = |a: usize, b: usize| row_cosine(w_proj, consensus[a], &rows64[b]);
    if let Some(last) = consensus.len().checked_sub(1) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for a in 0..last {
            for b in a + 1..last {
                lo = lo.min(cos(a, b));
                hi = hi.max(cos(a, b));
            }
        }
        if lo.is_finite() {
            r.set("content_cosine_min", lo);
            r.set("content_cosine_max", hi);
        }
        let outlier = (0..last).map(|a| cos(last, a).abs()).fold(0.0, f64::max);
        r.set("last_neuron_max_abs_cosine", outlier);
        let mut centroid = vec![0.0f64; w.config.d_model];
        for row in &rows64 {
            for (c, v) in centroid.iter_mut().zip(row) {
                *c += v / rows64.len() as f64;
            }
        }
        r.set("exception_cosine_with_consensus_mean", row_cosine(w_proj, ctx.partition.exception_neuron(), &centroid));
    }
    r.note("token class = token id with at least 50 occurrences; significance is Bonferroni-corrected Fisher exact, upper tail for enrichment and lower tail for depletion");
    Ok(r)
}
