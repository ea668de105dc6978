use tmlp_core::decomposition::{compare_rows, tier_outputs};
use tmlp_core::model::{forward, mlp_project, AblationSpec, TraceRequest};

use super::Context;
use crate::error::{Error, Result};
use crate::report::{columns, ExperimentReport};

pub const MAX_ABS_DIFF: f64 = 6e-5;
pub const MIN_COSINE: f64 = 0.9999999;

pub(super) fn run(ctx: &Context) -> Result<ExperimentReport> {
    let w = ctx.weights()?;
    let layer = w.config.last_layer();
    let budget = ctx.config.reconstruct_tokens;
    let len = ctx.config.sequence_length;
    let seqs = ctx.sequences(budget.div_ceil(len))?;
    let mut take = Vec::new();
    let mut left = budget;
    for s in seqs {
        let n = left.min(s.len());
        if n == 0 {
            break;
        }
        take.push(s[..n].to_vec());
        left -= n;
    }
    let per_seq = ctx.par_map(&take, |_, tokens| {
        let trace = forward(w, tokens, &AblationSpec::none(), &TraceRequest::mlp_layer(layer))?;
        let h = trace.mlp_post(layer)?;
        let blk = &w.blocks[layer];
        Ok(compare_rows(&tier_outputs(blk, &ctx.partition, h), &mlp_project(blk, h)))
    })?;

    let mut r = ExperimentReport::new(
        "reconstruct",
        columns(&[
            ("sequence", "", "corpus window index"),
            ("tokens", "count", ""),
            ("max_abs_diff", "", "max over tokens of the elementwise |tier sum − MLP output|"),
            ("min_cosine", "", "min over tokens of cos(tier sum, MLP output)"),
            ("failing_tokens", "count", "tokens over either tolerance"),
        ]),
    );
    let (mut worst, mut min_cos, mut total, mut failing) = (0.0f64, 1.0f64, 0usize, 0usize);
    for (s, rows) in per_seq.iter().enumerate() {
        let m = rows.iter().map(|x| x.max_abs_diff as f64).fold(0.0, f64::max);
        let c = rows.iter().map(|x| x.cosine).fold(1.0, f64::min);
        let f = rows.iter().filter(|x| x.max_abs_diff as f64 >= MAX_ABS_DIFF || x.cosine <= MIN_COSINE).count();
        r.push(vec![s.into(), rows.len().into(), m.into(), c.into(), f.into()]);
        worst = worst.max(m);
        min_cos = min_cos.min(c);
        total += rows.len();
        failing += f;
    }
    if total == 0 {
        return Err(Error::Config("reconstruct_tokens is zero".into()));
    }
    r.set("tokens", total);
    r.set("max_abs_diff", worst);
    r.set("min_cosine", min_cos);
    r.set("failing_tokens", failing);
    r.set("pass", failing == 0);
    Ok(r)
}
