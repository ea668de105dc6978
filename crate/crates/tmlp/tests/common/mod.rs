#![allow(dead_code)]

use std::path::PathBuf;

use tmlp::experiments::Context;
use tmlp::RunConfig;
use tmlp_core::{BpeVocab, ModelConfig, ModelWeights};

pub fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub fn vocab() -> BpeVocab {
    tmlp::vocab::load_vocab(&data("vocab.json"), &data("merges.txt")).unwrap()
}

/// Full vocabulary and MLP width so the canonical neuron indices apply,
/// everything else small.
pub fn small_config() -> ModelConfig {
    ModelConfig { n_layer: 2, n_head: 8, d_model: 32, d_mlp: 3072, n_vocab: 50257, n_ctx: 128, ln_eps: 1e-5 }
}

pub const TEXT: &str = "The river runs through the old town before it reaches the sea. \
Every spring the market fills with farmers who sell bread, cheese and honey. \
In 1969 the first crew landed on the moon, and the event was watched across the world. \
The committee met on Tuesday to discuss the budget, but no decision was reached. \
She opened the window, looked at the rain and decided to stay at home. \
Scientists measured the temperature of the lake every hour for three weeks. \
The library on the hill holds thousands of books about history and music. \
After the game the players walked back to the station in silence.\n";

pub fn corpus_text(repeats: usize) -> String {
    TEXT.repeat(repeats)
}

pub fn sequences(vocab: &BpeVocab, count: usize, length: usize) -> Vec<Vec<u32>> {
    let tokens = vocab.encode(&corpus_text(20));
    tmlp::corpus::windows(&tokens, count, length).unwrap()
}

pub fn small_run_config() -> RunConfig {
    RunConfig {
        sequence_count: 6,
        sequence_length: 48,
        bootstrap_resamples: 200,
        reconstruct_tokens: 100,
        ppl_sequences: 4,
        survey_sequences: 6,
        lens_eval_sequences: 4,
        lens_train_sequences: 2,
        lens_epochs: 1,
        ig_steps: 8,
        knowledge_extension: false,
        workers: 1,
        ..RunConfig::default()
    }
}

pub fn small_context(config: RunConfig, seed: u64) -> Context {
    let v = vocab();
    let seqs = sequences(&v, config.sequence_count, config.sequence_length);
    Context::new(config, Some(ModelWeights::random_init(small_config(), seed)), Some(v), seqs).unwrap()
}
