//! Prompt-level experiments: progressive rank, tier-stage predictions,
//! integrated-gradient neurons with knockout, and activation transplant.

use std::collections::BTreeMap;

use tmlp_core::decomposition::{progressive_prediction, progressive_rank, AccumulationMode, RankBase};
use tmlp_core::linalg::{argmax, rank_of, softmax_inplace, Matrix};
use tmlp_core::model::{forward, ig_from_state, resume_from_mlp, unembed_row, AblationSpec, ModelWeights, TraceRequest};
use tmlp_core::BpeVocab;

use super::{mean, median, Context};
use crate::error::{Error, Result};
use crate::prompts::{self, parse_fact_prompts, parse_transplant_pairs, source, FactPrompt};
use crate::report::{columns, Cell, ExperimentReport};

/// Neurons taken from the top of the attribution ranking.
pub const IG_TOP: usize = 20;
/// Rank at or below which a target counts as retrieved.
pub const TOP_K: usize = 10;

fn encode_prompt(vocab: &BpeVocab, p: &FactPrompt) -> Result<(Vec<u32>, u32)> {
    let tokens = vocab.encode(&p.prompt);
    if tokens.is_empty() {
        return Err(Error::Format(format!("empty prompt for target {:?}", p.target)));
    }
    Ok((tokens, vocab.single_token(&p.target)?))
}

fn decode(vocab: &BpeVocab, id: u32) -> String {
    vocab.decode(&[id]).unwrap_or_else(|_| id.to_string())
}

pub(super) fn knowledge(ctx: &Context) -> Result<ExperimentReport> {
    let w = ctx.weights()?;
    let vocab = ctx.vocab()?;
    let mut items: Vec<(&str, FactPrompt)> = parse_fact_prompts(&source(ctx.config.knowledge_prompts.as_deref(), prompts::KNOWLEDGE_TABLE)?)?
        .into_iter()
        .map(|p| ("table", p))
        .collect();
    if ctx.config.knowledge_extension {
        items.extend(parse_fact_prompts(prompts::KNOWLEDGE_EXTENSION)?.into_iter().map(|p| ("extension", p)));
    }
    let results = ctx.par_map(&items, |_, (_, p)| {
        let (tokens, target) = match encode_prompt(vocab, p) {
            Ok(x) => x,
            Err(e) => return Ok(Err(e.to_string())),
        };
        let s = progressive_rank(w, &tokens, target, AccumulationMode::Static, RankBase::MlpOnly)?;
        let c = progressive_rank(w, &tokens, target, AccumulationMode::Context, RankBase::MlpOnly)?;
        Ok(Ok((s, c)))
    })?;
    let mut r = ExperimentReport::new(
        "knowledge",
        columns(&[
            ("set", "", "table: the ten acceptance prompts; extension: additional fixtures"),
            ("category", "", ""),
            ("prompt", "", ""),
            ("target", "", ""),
            ("pre_mlp_rank", "rank", "target rank read from the pre-MLP residual"),
            ("static_best", "rank", "best rank while accumulating unit output rows"),
            ("context_best", "rank", "best rank while accumulating activation-scaled rows"),
            ("context_final", "rank", "rank from the full MLP output alone"),
            ("model_rank", "rank", "rank in the model's output distribution"),
            ("skipped", "", "reason the prompt was not scored"),
        ]),
    );
    let mut cats: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut by_set: BTreeMap<&str, (usize, usize, usize, Vec<f64>)> = BTreeMap::new();
    for ((set, p), res) in items.iter().zip(results) {
        match res {
            Err(reason) => {
                r.push(vec![
                    (*set).into(),
                    p.category.clone().into(),
                    p.prompt.clone().into(),
                    p.target.clone().into(),
                    Cell::Null,
                    Cell::Null,
                    Cell::Null,
                    Cell::Null,
                    Cell::Null,
                    reason.into(),
                ]);
            }
            Ok((s, c)) => {
                r.push(vec![
                    (*set).into(),
                    p.category.clone().into(),
                    p.prompt.clone().into(),
                    p.target.clone().into(),
                    c.pre_mlp_rank.into(),
                    s.best_rank.into(),
                    c.best_rank.into(),
                    (*c.ranks.last().expect("grid")).into(),
                    c.full_rank.into(),
                    Cell::Null,
                ]);
                cats.entry(p.category.clone()).or_default().push(c.best_rank);
                let e = by_set.entry(set).or_default();
                e.0 += 1;
                e.1 += (c.best_rank <= TOP_K) as usize;
                e.2 += (s.best_rank <= TOP_K) as usize;
                e.3.push(c.best_rank as f64);
            }
        }
    }
    for (set, (n, ctx_top, static_top, ranks)) in &by_set {
        r.set(&format!("{set}_prompts"), *n);
        r.set(&format!("{set}_context_top10"), *ctx_top);
        r.set(&format!("{set}_static_top10"), *static_top);
        r.set(&format!("{set}_median_context_rank"), median(ranks));
    }
    for (cat, ranks) in &cats {
        let f: Vec<f64> = ranks.iter().map(|&x| x as f64).collect();
        r.set(&format!("category.{cat}.n"), ranks.len());
        r.set(&format!("category.{cat}.top10"), ranks.iter().filter(|&&x| x <= TOP_K).count());
        r.set(&format!("category.{cat}.median_rank"), median(&f));
    }
    r.note("ranks are read from the partial MLP output alone through the final layernorm and unembedding; rank 1 is the argmax, ties to the lower token id");
    r.note("static mode adds unit output rows ordered by row norm; context mode scales rows by the activation and orders by |h|·||row||");
    r.note("the table set is the acceptance set; the extension set is not used for acceptance");
    Ok(r)
}

pub(super) fn progressive(ctx: &Context) -> Result<ExperimentReport> {
    let w = ctx.weights()?;
    let vocab = ctx.vocab()?;
    let items = parse_fact_prompts(&source(ctx.config.progressive_prompts.as_deref(), prompts::PROGRESSIVE_PROMPTS)?)?;
    let results = ctx.par_map(&items, |_, p| {
        let tokens = vocab.encode(&p.prompt);
        progressive_prediction(w, &tokens, &ctx.partition).map_err(Error::from)
    })?;
    let mut r = ExperimentReport::new(
        "progressive",
        columns(&[
            ("prompt", "", ""),
            ("expected", "", ""),
            ("pre_mlp", "", "top-1 from the pre-MLP residual"),
            ("after_core", "", ""),
            ("after_differentiators", "", ""),
            ("after_specialists", "", ""),
            ("final", "", "after the residual tier (the model's own top-1)"),
            ("reset_restore", "", "pre-MLP top-1 equals final, and the Core stage changes it"),
        ]),
    );
    let mut pattern = 0;
    let mut expected_hits = 0;
    for (p, s) in items.iter().zip(&results) {
        let t = s.top1;
        let rr = t[0] == t[4] && t[1] != t[4];
        pattern += rr as usize;
        expected_hits += (decode(vocab, t[4]) == p.target) as usize;
        let mut row: Vec<Cell> = vec![p.prompt.clone().into(), p.target.clone().into()];
        row.extend(t.iter().map(|&id| Cell::from(decode(vocab, id))));
        row.push(rr.into());
        r.push(row);
    }
    r.set("prompts", items.len());
    r.set("reset_restore", pattern);
    r.set("final_matches_expected", expected_hits);
    Ok(r)
}

/// Pre-MLP residual and MLP activation rows at the last prompt position.
fn last_state(w: &ModelWeights, tokens: &[u32]) -> Result<(Matrix, Matrix)> {
    let layer = w.config.last_layer();
    let trace = forward(w, tokens, &AblationSpec::none(), &TraceRequest::mlp_layer(layer))?;
    let last = tokens.len() - 1;
    Ok((trace.residual_pre_mlp(layer)?.slice_rows(last, last + 1), trace.mlp_post(layer)?.slice_rows(last, last + 1)))
}

/// Next-token distribution at the last position with `ablation` applied.
fn distribution(w: &ModelWeights, state: &(Matrix, Matrix), ablation: &AblationSpec) -> Result<Vec<f32>> {
    let hidden = resume_from_mlp(w, w.config.last_layer(), &state.0, &state.1, ablation)?;
    let mut p = unembed_row(w, hidden.row(0));
    softmax_inplace(&mut p);
    Ok(p)
}

/// The `k` neurons with the largest attributions, ties to the lower index.
pub fn top_attributed(attr: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..attr.len()).collect();
    idx.sort_by(|&a, &b| attr[b].total_cmp(&attr[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

struct KnResult {
    top: Vec<usize>,
    p_full: f32,
    p_knockout: f32,
}

pub(super) fn kn_replication(ctx: &Context) -> Result<ExperimentReport> {
    let w = ctx.weights()?;
    let vocab = ctx.vocab()?;
    let layer = w.config.last_layer();
    let steps = ctx.config.ig_steps;
    let items = parse_fact_prompts(&source(ctx.config.kn_prompts.as_deref(), prompts::KN_PROMPTS)?)?;
    let results = ctx.par_map(&items, |_, p| {
        let (tokens, target) = encode_prompt(vocab, p)?;
        let state = last_state(w, &tokens)?;
        let attr = ig_from_state(w, layer, state.0.row(0), state.1.row(0), target, steps)?;
        let top = top_attributed(&attr, IG_TOP);
        let p_full = distribution(w, &state, &AblationSpec::none())?[target as usize];
        let zeros: Vec<(usize, f32)> = top.iter().map(|&n| (n, 0.0)).collect();
        let p_knockout = distribution(w, &state, &AblationSpec::override_neurons(layer, zeros))?[target as usize];
        Ok(KnResult { top, p_full, p_knockout })
    })?;
    let routing = ctx.partition.routing_neurons();
    let consensus = ctx.partition.consensus();
    let mut r = ExperimentReport::new(
        "kn_replication",
        columns(&[
            ("prompt", "", ""),
            ("target", "", ""),
            ("p_full", "probability", ""),
            ("p_knockout", "probability", "top-20 attributed neurons set to zero"),
            ("delta_pp", "pp", "p_knockout − p_full"),
            ("routing_overlap", "count", "top-20 members among the 27 routing neurons"),
            ("consensus_overlap", "count", "top-20 members among the 7 consensus neurons"),
            ("top20", "", "attributed neurons, largest first"),
        ]),
    );
    let mut recurrence: BTreeMap<usize, usize> = BTreeMap::new();
    let mut deltas = Vec::new();
    let mut overlaps = Vec::new();
    let mut cons = Vec::new();
    for (p, k) in items.iter().zip(&results) {
        let ro = k.top.iter().filter(|n| routing.contains(n)).count();
        let co = k.top.iter().filter(|n| consensus.contains(n)).count();
        for n in k.top.iter().filter(|n| routing.contains(n)) {
            *recurrence.entry(*n).or_default() += 1;
        }
        let d = (k.p_knockout as f64 - k.p_full as f64) * 100.0;
        deltas.push(d);
        overlaps.push(ro as f64);
        cons.push(co as f64);
        r.push(vec![
            p.prompt.clone().into(),
            p.target.clone().into(),
            k.p_full.into(),
            k.p_knockout.into(),
            d.into(),
            ro.into(),
            co.into(),
            k.top.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" ").into(),
        ]);
    }
    let d_mlp = w.config.d_mlp as f64;
    let chance = routing.len() as f64 / d_mlp * IG_TOP as f64;
    let mean_overlap = mean(overlaps.iter().copied());
    r.set("prompts", items.len());
    r.set("mean_routing_overlap", mean_overlap);
    r.set("mean_consensus_overlap", mean(cons.iter().copied()));
    r.set("routing_chance", chance);
    r.set("consensus_chance", consensus.len() as f64 / d_mlp * IG_TOP as f64);
    r.set("routing_enrichment", mean_overlap.map(|m| m / chance));
    r.set("mean_delta_pp", mean(deltas.iter().copied()));
    r.set("positive", deltas.iter().filter(|&&d| d >= 0.1).count());
    r.set("negligible", deltas.iter().filter(|&&d| d.abs() < 0.1).count());
    r.set("negative", deltas.iter().filter(|&&d| d <= -0.1).count());
    r.set("positive_any", deltas.iter().filter(|&&d| d > 0.0).count());
    let mut rec: Vec<(usize, usize)> = recurrence.into_iter().collect();
    rec.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    r.set("recurrence", rec.iter().map(|(n, c)| format!("{n}:{c}")).collect::<Vec<_>>().join(" "));
    r.note("attribution: integrated gradients of the target probability at the last position from a zero baseline");
    r.note("positive/negative count changes of at least 0.1pp; positive_any counts every increase");
    Ok(r)
}

pub(super) fn transplant(ctx: &Context) -> Result<ExperimentReport> {
    let w = ctx.weights()?;
    let vocab = ctx.vocab()?;
    let layer = w.config.last_layer();
    let steps = ctx.config.ig_steps;
    let pairs = parse_transplant_pairs(&source(ctx.config.transplant_pairs.as_deref(), prompts::TRANSPLANT_PAIRS)?)?;
    let results = ctx.par_map(&pairs, |_, p| {
        let fact = vocab.single_token(&p.source_fact)?;
        let src_tokens = vocab.encode(&p.source);
        let dst_tokens = vocab.encode(&p.destination);
        let src = last_state(w, &src_tokens)?;
        let attr = ig_from_state(w, layer, src.0.row(0), src.1.row(0), fact, steps)?;
        let top = top_attributed(&attr, IG_TOP);
        let values: Vec<(usize, f32)> = top.iter().map(|&n| (n, src.1.get(0, n))).collect();
        let dst = last_state(w, &dst_tokens)?;
        let before = distribution(w, &dst, &AblationSpec::none())?;
        let after = distribution(w, &dst, &AblationSpec::override_neurons(layer, values))?;
        Ok((fact, before, after))
    })?;
    let mut r = ExperimentReport::new(
        "transplant",
        columns(&[
            ("source", "", ""),
            ("destination", "", ""),
            ("source_fact", "", ""),
            ("p_before", "probability", "source fact at the destination"),
            ("p_after", "probability", "with the source's top-20 activations transplanted"),
            ("delta_pp", "pp", ""),
            ("rank_before", "rank", ""),
            ("rank_after", "rank", ""),
            ("destination_top1_after", "", ""),
            ("transplanted", "", "source fact becomes the destination top-1"),
        ]),
    );
    let mut count = 0;
    let mut max_abs = 0.0f64;
    for (p, (fact, before, after)) in pairs.iter().zip(&results) {
        let f = *fact as usize;
        let d = (after[f] as f64 - before[f] as f64) * 100.0;
        let top1 = argmax(after);
        let done = top1 == f && argmax(before) != f;
        count += done as usize;
        max_abs = max_abs.max(d.abs());
        r.push(vec![
            p.source.clone().into(),
            p.destination.clone().into(),
            p.source_fact.clone().into(),
            before[f].into(),
            after[f].into(),
            d.into(),
            rank_of(before, f).into(),
            rank_of(after, f).into(),
            decode(vocab, top1 as u32).into(),
            done.into(),
        ]);
    }
    r.set("pairs", pairs.len());
    r.set("transplanted", count);
    r.set("max_abs_delta_pp", max_abs);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_attributed_orders_and_breaks_ties() {
        assert_eq!(top_attributed(&[0.5, 2.0, 0.5, -1.0, 3.0], 3), vec![4, 1, 0]);
        assert_eq!(top_attributed(&[1.0], 5), vec![0]);
    }
}
