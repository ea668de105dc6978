use proptest::prelude::*;
use tmlp_core::decomposition::{compare_rows, progressive_prediction, tier_outputs};
use tmlp_core::linalg::argmax;
use tmlp_core::model::{forward, mlp_project, resume_from_mlp, AblationSpec, TraceRequest};
use tmlp_core::{ModelConfig, ModelWeights, TierPartition};

/// Full MLP width so the canonical partition applies; everything else small.
fn model(seed: u64) -> ModelWeights {
    let cfg = ModelConfig { n_layer: 2, n_head: 4, d_model: 16, d_mlp: 3072, n_vocab: 300, n_ctx: 32, ln_eps: 1e-5 };
    ModelWeights::random_init(cfg, seed)
}

const PROMPT: [u32; 7] = [17, 250, 3, 3, 99, 0, 41];

#[test]
fn ablating_the_last_mlp_changes_only_what_follows_it() {
    let w = model(1);
    let req = TraceRequest { logits: true, ..TraceRequest::mlp_layer(1) };
    let full = forward(&w, &PROMPT, &AblationSpec::none(), &req).unwrap();
    let zero = forward(&w, &PROMPT, &AblationSpec::zero_mlp(1), &req).unwrap();
    assert_eq!(full.residual_pre_mlp(1).unwrap(), zero.residual_pre_mlp(1).unwrap());
    assert_eq!(full.mlp_post(1).unwrap(), zero.mlp_post(1).unwrap());
    assert_ne!(full.logits, zero.logits);
    let resumed = resume_from_mlp(&w, 1, full.residual_pre_mlp(1).unwrap(), full.mlp_post(1).unwrap(), &AblationSpec::zero_mlp(1)).unwrap();
    assert_eq!(resumed, zero.hidden);
}

#[test]
fn overriding_neurons_with_their_own_values_is_a_no_op() {
    let w = model(2);
    let t = forward(&w, &PROMPT, &AblationSpec::none(), &TraceRequest::mlp_layer(1)).unwrap();
    let h = t.mlp_post(1).unwrap();
    let last = PROMPT.len() - 1;
    let own: Vec<(usize, f32)> = [2123usize, 5, 3000].iter().map(|&n| (n, h.get(last, n))).collect();
    let resid = t.residual_pre_mlp(1).unwrap().slice_rows(last, last + 1);
    let h_last = h.slice_rows(last, last + 1);
    let a = resume_from_mlp(&w, 1, &resid, &h_last, &AblationSpec::none()).unwrap();
    let b = resume_from_mlp(&w, 1, &resid, &h_last, &AblationSpec::override_neurons(1, own)).unwrap();
    assert_eq!(a, b);
    let zeros: Vec<(usize, f32)> = [2123usize, 5, 3000].iter().map(|&n| (n, 0.0)).collect();
    let c = resume_from_mlp(&w, 1, &resid, &h_last, &AblationSpec::override_neurons(1, zeros)).unwrap();
    let d = resume_from_mlp(&w, 1, &resid, &h_last, &AblationSpec::zero_neurons(1, vec![2123, 5, 3000])).unwrap();
    assert_eq!(c, d);
}

#[test]
fn final_stage_prediction_is_the_model_top1() {
    let w = model(3);
    let p = progressive_prediction(&w, &PROMPT, &TierPartition::canonical()).unwrap();
    let t = forward(&w, &PROMPT, &AblationSpec::none(), &TraceRequest::logits()).unwrap();
    let logits = t.logits.unwrap();
    assert_eq!(p.top1[4] as usize, argmax(logits.row(PROMPT.len() - 1)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn tiers_sum_to_the_mlp_output(seed in 0u64..1000, tokens in proptest::collection::vec(0u32..300, 1..12)) {
        let w = model(seed);
        let t = forward(&w, &tokens, &AblationSpec::none(), &TraceRequest::mlp_layer(1)).unwrap();
        let h = t.mlp_post(1).unwrap();
        let blk = &w.blocks[1];
        for r in compare_rows(&tier_outputs(blk, &TierPartition::canonical(), h), &mlp_project(blk, h)) {
            prop_assert!(r.max_abs_diff < 6e-5);
            prop_assert!(r.cosine > 0.9999999);
        }
    }
}
