//! Surprisal and routing state at the disambiguating word of garden-path
//! minimal pairs.

use tmlp_core::linalg::gelu;
use tmlp_core::model::{forward, resume_from_mlp, target_log_probs, AblationSpec, ModelWeights, TraceRequest};
use tmlp_core::stats::{consensus_level, paired_t_test, wilcoxon_signed_rank, FiringMatrix, TokenMeta};
use tmlp_core::{BpeVocab, TierPartition};

use super::{median, Context};
use crate::error::{Error, Result};
use crate::prompts::{self, parse_garden_path_pairs, source, GardenPathPair};
use crate::report::{columns, Cell, ExperimentReport};

/// Measurements at the disambiguating token of one sentence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reading {
    pub surprisal_bits: f64,
    pub consensus: u8,
    pub exception: f32,
    /// `P_full − P_mlp_zeroed` of the disambiguating token, in pp.
    pub delta_p_pp: f64,
}

pub fn read_sentence(
    w: &ModelWeights,
    vocab: &BpeVocab,
    part: &TierPartition,
    theta: f32,
    pair: &GardenPathPair,
    transitive: bool,
) -> Result<Reading> {
    let loc = pair.locate(transitive, vocab)?;
    let p = loc.position;
    if p == 0 {
        return Err(Error::Format(format!("disambiguation {:?} is the first token", pair.disambiguation)));
    }
    let layer = w.config.last_layer();
    let trace = forward(w, &loc.tokens, &AblationSpec::none(), &TraceRequest::mlp_layer(layer))?;
    let x = trace.mlp_pre(layer)?;
    let meta: Vec<TokenMeta> =
        loc.tokens.iter().enumerate().map(|(i, &t)| TokenMeta { sequence: 0, position: i as u32, token: t }).collect();
    let firing = FiringMatrix::from_activations(x, &meta, theta)?;
    let target = [loc.tokens[p]];
    let full = target_log_probs(w, &trace.hidden.slice_rows(p - 1, p), &target)[0] as f64;
    let zeroed_hidden = resume_from_mlp(w, layer, trace.residual_pre_mlp(layer)?, trace.mlp_post(layer)?, &AblationSpec::zero_mlp(layer))?;
    let zeroed = target_log_probs(w, &zeroed_hidden.slice_rows(p - 1, p), &target)[0] as f64;
    Ok(Reading {
        surprisal_bits: -full / std::f64::consts::LN_2,
        consensus: consensus_level(&firing, p, part.consensus()),
        exception: gelu(x.get(p, part.exception_neuron())),
        delta_p_pp: (full.exp() - zeroed.exp()) * 100.0,
    })
}

pub(super) fn run(ctx: &Context) -> Result<ExperimentReport> {
    let w = ctx.weights()?;
    let vocab = ctx.vocab()?;
    let pairs = parse_garden_path_pairs(&source(ctx.config.garden_path_pairs.as_deref(), prompts::GARDEN_PATH_PAIRS)?)?;
    let theta = ctx.config.theta;
    let readings = ctx.par_map(&pairs, |_, pair| {
        Ok((
            read_sentence(w, vocab, &ctx.partition, theta, pair, false)?,
            read_sentence(w, vocab, &ctx.partition, theta, pair, true)?,
        ))
    })?;
    let mut r = ExperimentReport::new(
        "garden_path",
        columns(&[
            ("pair", "", ""),
            ("intransitive_verb", "", ""),
            ("transitive_verb", "", ""),
            ("disambiguation", "", ""),
            ("surprisal_intransitive", "bits", "−log2 P of the first piece of the disambiguating word"),
            ("surprisal_transitive", "bits", ""),
            ("delta", "bits", "transitive − intransitive"),
            ("consensus_intransitive", "level", "read at the disambiguating token"),
            ("consensus_transitive", "level", ""),
            ("exception_intransitive", "activation", "GELU output of the exception neuron at the disambiguating token"),
            ("exception_transitive", "activation", ""),
            ("dp_intransitive", "pp", "P_full − P_mlp_zeroed of the disambiguating token"),
            ("dp_transitive", "pp", ""),
        ]),
    );
    let mut deltas = Vec::new();
    for (i, (pair, (a, b))) in pairs.iter().zip(&readings).enumerate() {
        let d = b.surprisal_bits - a.surprisal_bits;
        deltas.push(d);
        r.push(vec![
            (i + 1).into(),
            pair.intransitive_verb.clone().into(),
            pair.transitive_verb.clone().into(),
            pair.disambiguation.clone().into(),
            a.surprisal_bits.into(),
            b.surprisal_bits.into(),
            d.into(),
            a.consensus.into(),
            b.consensus.into(),
            a.exception.into(),
            b.exception.into(),
            a.delta_p_pp.into(),
            b.delta_p_pp.into(),
        ]);
    }
    r.set("pairs", pairs.len());
    r.set("transitive_higher", deltas.iter().filter(|&&d| d > 0.0).count());
    r.set("median_delta_bits", median(&deltas));
    let surprisal: Vec<(f64, f64)> = readings.iter().map(|(a, b)| (a.surprisal_bits, b.surprisal_bits)).collect();
    match wilcoxon_signed_rank(&surprisal) {
        Ok(t) => {
            r.set("wilcoxon_w", t.w);
            r.set("wilcoxon_w_plus", t.w_plus);
            r.set("wilcoxon_w_minus", t.w_minus);
            r.set("wilcoxon_p", t.p_two_sided);
            r.set("wilcoxon_exact", t.exact);
        }
        Err(e) => {
            r.set("wilcoxon_w", Cell::Null);
            r.note(format!("Wilcoxon test not computed: {e}"));
        }
    }
    let exception: Vec<(f64, f64)> = readings.iter().map(|(a, b)| (a.exception as f64, b.exception as f64)).collect();
    r.set("exception_mean_intransitive", super::mean(exception.iter().map(|e| e.0)));
    r.set("exception_mean_transitive", super::mean(exception.iter().map(|e| e.1)));
    match paired_t_test(&exception) {
        Ok(t) => {
            r.set("exception_t", t.t);
            r.set("exception_df", t.df);
            r.set("exception_p", t.p_two_sided);
        }
        Err(e) => {
            r.set("exception_t", Cell::Null);
            r.note(format!("paired t-test not computed: {e}"));
        }
    }
    r.note("sentences are encoded without a leading end-of-text token");
    r.note("sentences are built from each pair's verbs and disambiguating word");
    Ok(r)
}
