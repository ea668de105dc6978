//! Logit-lens and tuned-lens accuracy at every block boundary, and the
//! boundary where each token is first predicted.

use rayon::prelude::*;
use tmlp_core::model::{
    forward, lens_top1, train_tuned_lens, AblationSpec, AffineProbe, TraceRequest, TunedLensHyperparams, TunedLensLog,
    TunedLensProbes,
};
use tmlp_core::Matrix;

use super::Context;
use crate::error::{Error, Result};
use crate::report::{columns, ExperimentReport};

/// Evaluation windows come first in the corpus and training windows last.
pub fn split(ctx: &Context) -> Result<(&[Vec<u32>], &[Vec<u32>])> {
    let all = &ctx.sequences;
    let (e, t) = (ctx.config.lens_eval_sequences, ctx.config.lens_train_sequences);
    if e == 0 {
        return Err(Error::Config("lens_eval_sequences must be positive".into()));
    }
    if e + t > all.len() {
        return Err(Error::Config(format!(
            "lens needs {e} evaluation and {t} training windows but the corpus has {}; they must not overlap",
            all.len()
        )));
    }
    Ok((&all[..e], &all[all.len() - t..]))
}

/// Trains probes on the training split, scheduling probe updates on the
/// worker pool.
pub fn train_probes(ctx: &Context, train: &[Vec<u32>]) -> Result<(TunedLensProbes, TunedLensLog)> {
    let w = ctx.weights()?;
    let hp = TunedLensHyperparams { learning_rate: ctx.config.lens_learning_rate, epochs: ctx.config.lens_epochs };
    let map = |probes: &mut [AffineProbe], f: &(dyn Fn(usize, &mut AffineProbe) -> tmlp_core::Result<f64> + Sync)| {
        probes.par_iter_mut().enumerate().map(|(i, p)| f(i, p)).collect::<tmlp_core::Result<Vec<f64>>>()
    };
    Ok(ctx.install(|| train_tuned_lens(w, train, &hp, &map))?)
}

struct Counts {
    logit: Vec<u64>,
    tuned: Vec<u64>,
    lock_in: Vec<u64>,
    never: u64,
    tokens: u64,
}

pub(super) fn run(ctx: &Context) -> Result<ExperimentReport> {
    let w = ctx.weights()?;
    let cfg = &w.config;
    let (eval, train) = split(ctx)?;
    let (probes, log) = match &ctx.config.probes {
        Some(p) => (crate::probes::load_probes(p, cfg.n_layer + 1, cfg.d_model)?, None),
        None => {
            if train.is_empty() {
                return Err(Error::Config("no probes given and lens_train_sequences is 0".into()));
            }
            log::info!("training tuned-lens probes on {} windows", train.len());
            let (p, l) = train_probes(ctx, train)?;
            (p, Some(l))
        }
    };
    let boundaries = cfg.n_layer + 1;
    let request = TraceRequest::block_boundaries(cfg);
    let per_seq = ctx.par_map(eval, |_, tokens| {
        let n = tokens.len() - 1;
        let trace = forward(w, tokens, &AblationSpec::none(), &request)?;
        let targets = &tokens[1..];
        let mut c = Counts {
            logit: vec![0; boundaries],
            tuned: vec![0; boundaries],
            lock_in: vec![0; boundaries],
            never: 0,
            tokens: n as u64,
        };
        let mut first: Vec<Option<usize>> = vec![None; n];
        for b in 0..boundaries {
            let resid: &Matrix = if b == 0 {
                trace.embedding.as_ref().expect("embedding traced")
            } else {
                trace.residual_post_block(b - 1)?
            };
            let resid = resid.slice_rows(0, n);
            let logit = lens_top1(w, &resid, None);
            let tuned = lens_top1(w, &resid, Some(&probes.probes[b]));
            for t in 0..n {
                c.logit[b] += (logit[t] == targets[t]) as u64;
                if tuned[t] == targets[t] {
                    c.tuned[b] += 1;
                    first[t].get_or_insert(b);
                }
            }
        }
        for f in first {
            match f {
                Some(b) => c.lock_in[b] += 1,
                None => c.never += 1,
            }
        }
        Ok(c)
    })?;
    let mut total = Counts { logit: vec![0; boundaries], tuned: vec![0; boundaries], lock_in: vec![0; boundaries], never: 0, tokens: 0 };
    for c in &per_seq {
        for b in 0..boundaries {
            total.logit[b] += c.logit[b];
            total.tuned[b] += c.tuned[b];
            total.lock_in[b] += c.lock_in[b];
        }
        total.never += c.never;
        total.tokens += c.tokens;
    }
    let pct = |x: u64| 100.0 * x as f64 / total.tokens as f64;
    let mut r = ExperimentReport::new(
        "lens",
        columns(&[
            ("boundary", "", "emb reads the embedding; n reads the output of block n"),
            ("logit_top1", "%", "plain logit lens, top-1 equals the true next token"),
            ("tuned_top1", "%", ""),
            ("delta", "pp", "tuned − logit"),
            ("first_lock_in", "%", "tokens first predicted by the tuned lens at this boundary"),
            ("final_epoch_loss", "nats", "mean KL of the probe in its last training epoch"),
        ]),
    );
    let mut dominates = true;
    let mut lock_sum = 0.0;
    for b in 0..boundaries {
        let (l, t, f) = (pct(total.logit[b]), pct(total.tuned[b]), pct(total.lock_in[b]));
        dominates &= total.tuned[b] >= total.logit[b];
        lock_sum += f;
        let loss = log.as_ref().and_then(|l| l.epoch_loss[b].last().copied());
        r.push(vec![TunedLensProbes::label(b).into(), l.into(), t.into(), (t - l).into(), f.into(), loss.into()]);
    }
    let never = pct(total.never);
    r.set("eval_sequences", eval.len());
    r.set("train_sequences", if ctx.config.probes.is_some() { 0 } else { train.len() });
    r.set("tokens", total.tokens);
    r.set("never", never);
    r.set("lock_in_plus_never", lock_sum + never);
    r.set("tuned_dominates_logit", dominates);
    r.set("probes_loaded", ctx.config.probes.is_some());
    r.note("evaluation windows are the first lens_eval_sequences of the corpus; training windows are the last lens_train_sequences");
    Ok(r)
}
