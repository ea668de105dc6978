//! Exception-handler structure at every layer.
//!
//! Pass one builds each layer's firing matrix and a per-neuron histogram of
//! GELU outputs. Neurons whose histogram splits into two modes get a regime
//! mask in pass two. A layer's candidate exception neuron is the bimodal
//! neuron whose regime bit correlates most negatively with that layer's own
//! consensus count (the seven neurons with the highest fire rates).

use tmlp_core::linalg::gelu;
use tmlp_core::model::{forward, AblationSpec, TraceRequest};
use tmlp_core::stats::{consensus_levels, fisher_enrichment, FiringMatrix, Histogram, Mask, TokenMeta};
use tmlp_core::Tier;

use super::Context;
use crate::error::Result;
use crate::report::{columns, Cell, ExperimentReport};

/// Partners of the candidate examined for co-firing.
pub const SURVEY_TOP_PARTNERS: usize = 30;
/// Jaccard above which a pair counts as tightly co-firing.
pub const HI_JACCARD: f64 = 0.5;
/// Histogram anchor, just below the minimum of the tanh GELU (≈ −0.170).
const HIST_MIN: f64 = -0.175;
/// Values above this land in the last bin.
const HIST_MAX: f64 = 25.0;
const CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSurvey {
    pub candidate: Option<usize>,
    pub threshold: Option<f64>,
    pub regime_rate: Option<f64>,
    pub correlation: Option<f64>,
    pub max_jaccard: Option<f64>,
    pub hi_jaccard: usize,
    pub max_enrichment: Option<f64>,
    pub bimodal_neurons: usize,
}

fn pearson_with_levels(mask: &Mask, levels: &[u8]) -> Option<f64> {
    let n = levels.len() as f64;
    let sx = mask.count() as f64;
    let sy: f64 = levels.iter().map(|&l| l as f64).sum();
    let syy: f64 = levels.iter().map(|&l| (l as f64).powi(2)).sum();
    let sxy: f64 = mask.ones().map(|t| levels[t] as f64).sum();
    let vx = n * sx - sx * sx;
    let vy = n * syy - sy * sy;
    (vx > 0.0 && vy > 0.0).then(|| (n * sxy - sx * sy) / (vx * vy).sqrt())
}

fn mask_jaccard(a: &Mask, b: &Mask) -> f64 {
    let u = a.or_count(b);
    if u == 0 {
        0.0
    } else {
        a.and_count(b) as f64 / u as f64
    }
}

/// The neurons with the highest fire rates, ties to the lower index.
pub fn top_rate_neurons(f: &FiringMatrix, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..f.neurons()).collect();
    idx.sort_by(|&a, &b| f.fire_count(b).cmp(&f.fire_count(a)).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Picks the candidate among `regimes` (neuron, threshold, mask) and
/// measures its co-firing partners.
pub fn survey_layer(f: &FiringMatrix, regimes: &[(usize, f64, Mask)], levels: &[u8]) -> LayerSurvey {
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, _, m)) in regimes.iter().enumerate() {
        if let Some(r) = pearson_with_levels(m, levels) {
            if best.is_none_or(|(_, b)| r < b) {
                best = Some((i, r));
            }
        }
    }
    let Some((i, corr)) = best else {
        return LayerSurvey {
            candidate: None,
            threshold: None,
            regime_rate: None,
            correlation: None,
            max_jaccard: None,
            hi_jaccard: 0,
            max_enrichment: None,
            bimodal_neurons: regimes.len(),
        };
    };
    let (cand, threshold, mask) = &regimes[i];
    let mut partners: Vec<(usize, f64)> =
        (0..f.neurons()).filter(|n| n != cand).map(|n| (n, mask_jaccard(mask, f.column(n)))).collect();
    partners.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    partners.truncate(SURVEY_TOP_PARTNERS);
    let max_enrichment = partners
        .iter()
        .filter_map(|&(n, _)| fisher_enrichment(f, mask, n).enrichment)
        .fold(None, |a: Option<f64>, e| Some(a.map_or(e, |a| a.max(e))));
    LayerSurvey {
        candidate: Some(*cand),
        threshold: Some(*threshold),
        regime_rate: Some(mask.count() as f64 / mask.len().max(1) as f64),
        correlation: Some(corr),
        max_jaccard: partners.first().map(|p| p.1),
        hi_jaccard: partners.iter().filter(|p| p.1 > HI_JACCARD).count(),
        max_enrichment,
        bimodal_neurons: regimes.len(),
    }
}

struct Pass1 {
    firing: Vec<FiringMatrix>,
    bins: Vec<Vec<u16>>,
}

pub(super) fn run(ctx: &Context) -> Result<ExperimentReport> {
    let w = ctx.weights()?;
    let cfg = &w.config;
    let seqs = ctx.sequences(ctx.config.survey_sequences)?;
    let theta = ctx.config.theta;
    let width = ctx.config.bin_width;
    let nbins = ((HIST_MAX - HIST_MIN) / width) as usize + 1;
    if nbins > u16::MAX as usize {
        return Err(crate::Error::Config(format!("bin_width {width} gives too many histogram bins")));
    }
    let layers: Vec<usize> = (0..cfg.n_layer).collect();
    let request = TraceRequest { mlp_activations: layers.clone(), ..TraceRequest::default() };
    let bin_of = |v: f32| -> u16 { (((v as f64 - HIST_MIN) / width).max(0.0) as usize).min(nbins - 1) as u16 };

    let mut firing: Vec<FiringMatrix> = layers.iter().map(|_| FiringMatrix::new(cfg.d_mlp, theta)).collect();
    let mut hist = vec![vec![0u32; cfg.d_mlp * nbins]; cfg.n_layer];
    log::info!("cross-layer survey: pass 1 over {} sequences", seqs.len());
    for (c, chunk) in seqs.chunks(CHUNK).enumerate() {
        let out = ctx.par_map(chunk, |i, tokens| {
            let s = c * CHUNK + i;
            let trace = forward(w, tokens, &AblationSpec::none(), &request)?;
            let meta: Vec<TokenMeta> = tokens
                .iter()
                .enumerate()
                .map(|(p, &t)| TokenMeta { sequence: s as u32, position: p as u32, token: t })
                .collect();
            let mut p = Pass1 { firing: Vec::new(), bins: Vec::new() };
            for &l in &layers {
                let x = trace.mlp_pre(l)?;
                p.firing.push(FiringMatrix::from_activations(x, &meta, theta)?);
                p.bins.push(x.as_slice().iter().map(|&v| bin_of(gelu(v))).collect());
            }
            Ok(p)
        })?;
        for p in out {
            for l in 0..cfg.n_layer {
                firing[l].append(&p.firing[l])?;
                for (k, &b) in p.bins[l].iter().enumerate() {
                    let n = k % cfg.d_mlp;
                    hist[l][n * nbins + b as usize] += 1;
                }
            }
        }
    }

    // bimodal thresholds per layer
    let thresholds: Vec<Vec<(usize, f64)>> = ctx.install(|| {
        use rayon::prelude::*;
        hist.par_iter()
            .map(|h| {
                (0..cfg.d_mlp)
                    .filter_map(|n| {
                        let counts = h[n * nbins..(n + 1) * nbins].iter().map(|&c| c as u64).collect();
                        Histogram { min: HIST_MIN, width, counts }.split().ok().map(|t| (n, t))
                    })
                    .collect()
            })
            .collect()
    });
    drop(hist);

    let last = cfg.last_layer();
    let part = &ctx.partition;
    let exc = part.exception_neuron();
    let known_threshold = ctx.config.exception_threshold;
    log::info!("cross-layer survey: pass 2");
    let mut masks: Vec<Vec<Mask>> = thresholds.iter().map(|t| vec![Mask::default(); t.len()]).collect();
    let mut known = Mask::default();
    for chunk in seqs.chunks(CHUNK) {
        let out = ctx.par_map(chunk, |_, tokens| {
            let trace = forward(w, tokens, &AblationSpec::none(), &request)?;
            let mut per_layer = Vec::with_capacity(cfg.n_layer);
            for (l, ts) in thresholds.iter().enumerate() {
                let x = trace.mlp_pre(l)?;
                per_layer.push(
                    ts.iter()
                        .map(|&(n, t)| Mask::from_bools((0..x.rows()).map(|r| gelu(x.get(r, n)) as f64 > t)))
                        .collect::<Vec<_>>(),
                );
            }
            let x = trace.mlp_pre(last)?;
            let k = Mask::from_bools((0..x.rows()).map(|r| gelu(x.get(r, exc)) > known_threshold));
            Ok((per_layer, k))
        })?;
        for (per_layer, k) in out {
            for (acc, m) in masks.iter_mut().zip(per_layer) {
                for (a, b) in acc.iter_mut().zip(m) {
                    a.extend(&b);
                }
            }
            known.extend(&k);
        }
    }

    let mut r = ExperimentReport::new(
        "cross_layer",
        columns(&[
            ("layer", "", ""),
            ("kind", "", "auto: detected candidate; known: canonical partition"),
            ("candidate", "", "exception neuron"),
            ("threshold", "", "regime threshold on the signed GELU output"),
            ("regime_rate", "fraction", "exception fire rate"),
            ("consensus_correlation", "", "Pearson r of regime bit and layer consensus count"),
            ("max_jaccard", "", "auto: candidate regime vs partner firing; known: Core pairwise"),
            ("max_enrichment", "ratio", "max Fisher enrichment of partners under the regime"),
            ("hi_jaccard_pairs", "count", "pairs with Jaccard above 0.5"),
            ("bimodal_neurons", "count", ""),
            ("consensus_neurons", "", "seven highest fire rates at the layer"),
        ]),
    );
    let mut other_max = 0.0f64;
    let mut other_hi = 0usize;
    for l in 0..cfg.n_layer {
        let f = &firing[l];
        let top = top_rate_neurons(f, part.consensus().len());
        let levels = consensus_levels(f, &top);
        let regimes: Vec<(usize, f64, Mask)> =
            thresholds[l].iter().zip(std::mem::take(&mut masks[l])).map(|(&(n, t), m)| (n, t, m)).collect();
        let s = survey_layer(f, &regimes, &levels);
        if s.candidate.is_none() {
            r.note(format!("layer {l}: no bimodal neuron anticorrelated with consensus; exception fields absent"));
        }
        if l != last {
            other_max = other_max.max(s.max_jaccard.unwrap_or(0.0));
            other_hi += s.hi_jaccard;
        }
        let consensus_list = top.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
        r.push(vec![
            l.into(),
            "auto".into(),
            s.candidate.into(),
            s.threshold.into(),
            s.regime_rate.into(),
            s.correlation.into(),
            s.max_jaccard.into(),
            s.max_enrichment.into(),
            s.hi_jaccard.into(),
            s.bimodal_neurons.into(),
            consensus_list.clone().into(),
        ]);
        if l == last {
            let core = part.tier(Tier::Core);
            let mut core_max = 0.0f64;
            for (i, &a) in core.iter().enumerate() {
                for &b in &core[i + 1..] {
                    core_max = core_max.max(f.jaccard(a, b));
                }
            }
            let hi = core.iter().filter(|&&c| c != exc && f.jaccard(exc, c) > HI_JACCARD).count();
            let enr = part
                .exception_handler()
                .iter()
                .filter(|&&n| n != exc)
                .filter_map(|&n| fisher_enrichment(f, &known, n).enrichment)
                .fold(None, |a: Option<f64>, e| Some(a.map_or(e, |a| a.max(e))));
            let rate = known.count() as f64 / known.len().max(1) as f64;
            r.push(vec![
                l.into(),
                "known".into(),
                exc.into(),
                (known_threshold as f64).into(),
                rate.into(),
                Cell::Null,
                core_max.into(),
                enr.into(),
                hi.into(),
                Cell::Null,
                consensus_list.into(),
            ]);
            r.set("known_max_jaccard", core_max);
            r.set("known_hi_jaccard_pairs", hi);
            r.set("known_regime_rate", rate);
        }
    }
    r.set("tokens", firing[0].tokens());
    r.set("other_layers_max_jaccard", other_max);
    r.set("other_layers_hi_jaccard_pairs", other_hi);
    r.note("auto rows use this detection procedure: bimodal split of each neuron's GELU histogram, candidate = most negative correlation with the layer's own consensus count");
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_is_most_anticorrelated_and_partners_are_measured() {
        let n = 200;
        let meta: Vec<TokenMeta> = (0..n).map(|i| TokenMeta { sequence: 0, position: i, token: 0 }).collect();
        let mut f = FiringMatrix::zeros(meta, 40, 0.1);
        let levels: Vec<u8> = (0..n).map(|i| (i % 8) as u8).collect();
        // neuron 3 fires exactly where the level is low
        let low = Mask::from_bools(levels.iter().map(|&l| l < 2));
        let high = Mask::from_bools(levels.iter().map(|&l| l > 5));
        for t in low.ones() {
            f.set(t, 3, true);
            f.set(t, 4, true);
        }
        let regimes = vec![(1, 1.0, high.clone()), (3, 1.2, low.clone())];
        let s = survey_layer(&f, &regimes, &levels);
        assert_eq!(s.candidate, Some(3));
        assert!(s.correlation.unwrap() < -0.5);
        assert_eq!(s.max_jaccard, Some(1.0));
        assert_eq!(s.hi_jaccard, 1);
        assert_eq!(s.bimodal_neurons, 2);
        assert!((s.regime_rate.unwrap() - 0.25).abs() < 1e-12);
        let none = survey_layer(&f, &[], &levels);
        assert_eq!(none.candidate, None);
    }

    #[test]
    fn top_rates_break_ties_by_index() {
        let meta: Vec<TokenMeta> = (0..4).map(|i| TokenMeta { sequence: 0, position: i, token: 0 }).collect();
        let mut f = FiringMatrix::zeros(meta, 5, 0.1);
        for t in 0..4 {
            f.set(t, 4, true);
            f.set(t, 2, t < 2);
            f.set(t, 1, t < 2);
        }
        assert_eq!(top_rate_neurons(&f, 3), vec![4, 1, 2]);
    }
}
