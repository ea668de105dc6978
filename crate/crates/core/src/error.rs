use alloc::string::String;

/// Errors produced by the core computations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("token id {id} is outside the vocabulary of {vocab} entries")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence of {len} tokens exceeds the context window of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("invalid weights: {0}")]
    Weights(String),

    #[error("invalid neuron partition: {0}")]
    Partition(String),

    #[error("no bimodal structure: {0}")]
    NotBimodal(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("tuned-lens training diverged at layer {layer}, step {step}")]
    Diverged { layer: String, step: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn input(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}
