//! GPT-2 parameters and the traced forward pass.
//!
//! All projection matrices are stored in `in × out` orientation, so a layer
//! computes `y = x · W + b` on row vectors. That is the layout of the released
//! GPT-2 checkpoint (its `Conv1D` modules); checkpoints saved from plain linear
//! layers (`out × in`) are transposed on load, see [`WeightLayout`].

mod attribution;
mod forward;
mod init;
mod lens;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use init::INIT_STD;
pub use attribution::{ig_attribution, ig_from_state, target_prob_and_grad, IG_DEFAULT_STEPS};
pub use forward::{
    bos_attention_mass, forward, head_contributions, mlp_project, perplexity, resume_from_mlp, sequence_nll,
    target_log_probs, unembed, unembed_row, AblationSpec, Gpt2Scorer, LayerTrace, NextTokenScorer, Trace,
    TraceRequest,
};
pub use lens::{
    lens_top1, logit_lens, sequential_probe_map, train_tuned_lens, AffineProbe, ProbeMap, TunedLensHyperparams, TunedLensLog, TunedLensProbes,
};

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_vocab: usize,
    pub n_ctx: usize,
    pub ln_eps: f32,
}

impl ModelConfig {
    pub const GPT2_SMALL: ModelConfig = ModelConfig {
        n_layer: 12,
        n_head: 12,
        d_model: 768,
        d_mlp: 3072,
        n_vocab: 50257,
        n_ctx: 1024,
        ln_eps: 1e-5,
    };

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layer == 0 || self.n_head == 0 || self.d_model == 0 || self.d_mlp == 0 {
            return Err(Error::Weights("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_head != 0 {
            return Err(Error::Weights(format!("d_model {} not divisible by {} heads", self.d_model, self.n_head)));
        }
        Ok(())
    }

    /// Index of the last block, the one whose MLP the routing analysis targets.
    pub fn last_layer(&self) -> usize {
        self.n_layer - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// One transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    /// `d × 3d`, columns ordered q | k | v.
    pub w_qkv: Matrix,
    pub b_qkv: Vec<f32>,
    /// `d × d`
    pub w_attn_out: Matrix,
    pub b_attn_out: Vec<f32>,
    pub ln2: LayerNormParams,
    /// `d × d_mlp`
    pub w_fc: Matrix,
    pub b_fc: Vec<f32>,
    /// `d_mlp × d`; row `n` is neuron `n`'s output direction.
    pub w_proj: Matrix,
    pub b_proj: Vec<f32>,
}

/// Full parameter set. The unembedding is `wteᵀ` (tied weights).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `n_vocab × d`
    pub wte: Matrix,
    /// `n_ctx × d`
    pub wpe: Matrix,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNormParams,
}

/// Orientation of 2-D projection tensors in a checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeightLayout {
    /// `in × out`, as in the released GPT-2 checkpoint.
    #[default]
    Conv1D,
    /// `out × in`, as saved by linear layers.
    Linear,
}

/// Role of a named checkpoint tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    /// Shape after normalisation to `in × out`.
    pub shape: Vec<usize>,
    /// Whether the tensor is a projection matrix subject to [`WeightLayout`].
    pub projection: bool,
}

impl ModelWeights {
    /// Tensor names and shapes of a GPT-2 checkpoint with this configuration,
    /// in a fixed order.
    pub fn tensor_specs(config: &ModelConfig) -> Vec<TensorSpec> {
        let d = config.d_model;
        let spec = |name: String, shape: Vec<usize>, projection: bool| TensorSpec { name, shape, projection };
        let mut out = Vec::new();
        out.push(spec("wte.weight".into(), alloc::vec![config.n_vocab, d], false));
        out.push(spec("wpe.weight".into(), alloc::vec![config.n_ctx, d], false));
        for i in 0..config.n_layer {
            let p = |s: &str| format!("h.{i}.{s}");
            out.push(spec(p("ln_1.weight"), alloc::vec![d], false));
            out.push(spec(p("ln_1.bias"), alloc::vec![d], false));
            out.push(spec(p("attn.c_attn.weight"), alloc::vec![d, 3 * d], true));
            out.push(spec(p("attn.c_attn.bias"), alloc::vec![3 * d], false));
            out.push(spec(p("attn.c_proj.weight"), alloc::vec![d, d], true));
            out.push(spec(p("attn.c_proj.bias"), alloc::vec![d], false));
            out.push(spec(p("ln_2.weight"), alloc::vec![d], false));
            out.push(spec(p("ln_2.bias"), alloc::vec![d], false));
            out.push(spec(p("mlp.c_fc.weight"), alloc::vec![d, config.d_mlp], true));
            out.push(spec(p("mlp.c_fc.bias"), alloc::vec![config.d_mlp], false));
            out.push(spec(p("mlp.c_proj.weight"), alloc::vec![config.d_mlp, d], true));
            out.push(spec(p("mlp.c_proj.bias"), alloc::vec![d], false));
        }
        out.push(spec("ln_f.weight".into(), alloc::vec![d], false));
        out.push(spec("ln_f.bias".into(), alloc::vec![d], false));
        out
    }

    /// Assembles weights from named tensors.
    ///
    /// `fetch(name)` returns the tensor's stored shape and its values converted
    /// to f32 (row-major), or `None` if the tensor is missing. Projection
    /// matrices stored in [`WeightLayout::Linear`] orientation are transposed.
    pub fn from_tensors<F>(config: ModelConfig, layout: WeightLayout, mut fetch: F) -> Result<Self>
    where
        F: FnMut(&str) -> Result<Option<(Vec<usize>, Vec<f32>)>>,
    {
        config.validate()?;
        let mut tensors: Vec<Matrix> = Vec::new();
        for spec in Self::tensor_specs(&config) {
            let (shape, data) = fetch(&spec.name)?.ok_or_else(|| Error::Weights(format!("missing tensor {}", spec.name)))?;
            let stored_shape = if spec.projection && layout == WeightLayout::Linear {
                alloc::vec![spec.shape[1], spec.shape[0]]
            } else {
                spec.shape.clone()
            };
            if shape != stored_shape {
                return Err(Error::Weights(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    spec.name, shape, stored_shape
                )));
            }
            let m = match spec.shape.as_slice() {
                [n] => Matrix::from_vec(1, *n, data)?,
                [r, c] if spec.projection && layout == WeightLayout::Linear => Matrix::from_vec(*c, *r, data)?.transpose(),
                [r, c] => Matrix::from_vec(*r, *c, data)?,
                _ => unreachable!("tensor specs are 1-D or 2-D"),
            };
            tensors.push(m);
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("tensor count matches specs");
        let vec_of = |m: Matrix| m.into_vec();
        let wte = next();
        let wpe = next();
        let mut blocks = Vec::with_capacity(config.n_layer);
        for _ in 0..config.n_layer {
            let ln1 = LayerNormParams { gamma: vec_of(next()), beta: vec_of(next()) };
            let w_qkv = next();
            let b_qkv = vec_of(next());
            let w_attn_out = next();
            let b_attn_out = vec_of(next());
            let ln2 = LayerNormParams { gamma: vec_of(next()), beta: vec_of(next()) };
            let w_fc = next();
            let b_fc = vec_of(next());
            let w_proj = next();
            let b_proj = vec_of(next());
            blocks.push(Block { ln1, w_qkv, b_qkv, w_attn_out, b_attn_out, ln2, w_fc, b_fc, w_proj, b_proj });
        }
        let ln_f = LayerNormParams { gamma: vec_of(next()), beta: vec_of(next()) };
        let weights = Self { config, wte, wpe, blocks, ln_f };
        weights.validate()?;
        Ok(weights)
    }

    /// Named tensors in checkpoint order, `Conv1D` orientation.
    pub fn to_tensors(&self) -> Vec<(TensorSpec, &[f32])> {
        let specs = Self::tensor_specs(&self.config);
        let mut data: Vec<&[f32]> = Vec::with_capacity(specs.len());
        data.push(self.wte.as_slice());
        data.push(self.wpe.as_slice());
        for b in &self.blocks {
            data.extend_from_slice(&[
                &b.ln1.gamma,
                &b.ln1.beta,
                b.w_qkv.as_slice(),
                &b.b_qkv,
                b.w_attn_out.as_slice(),
                &b.b_attn_out,
                &b.ln2.gamma,
                &b.ln2.beta,
                b.w_fc.as_slice(),
                &b.b_fc,
                b.w_proj.as_slice(),
                &b.b_proj,
            ]);
        }
        data.push(&self.ln_f.gamma);
        data.push(&self.ln_f.beta);
        specs.into_iter().zip(data).collect()
    }

    /// Checks every shape against the configuration.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        let check = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Weights(format!("{what}: shape {got:?}, expected {want:?}")))
            }
        };
        let check_len = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Weights(format!("{what}: length {got}, expected {want}")))
            }
        };
        check("wte", self.wte.shape(), (c.n_vocab, d))?;
        check("wpe", self.wpe.shape(), (c.n_ctx, d))?;
        if self.blocks.len() != c.n_layer {
            return Err(Error::Weights(format!("{} blocks, expected {}", self.blocks.len(), c.n_layer)));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let name = |s: &str| format!("h.{i}.{s}");
            check_len(&name("ln_1.weight"), b.ln1.gamma.len(), d)?;
            check_len(&name("ln_1.bias"), b.ln1.beta.len(), d)?;
            check(&name("attn.c_attn.weight"), b.w_qkv.shape(), (d, 3 * d))?;
            check_len(&name("attn.c_attn.bias"), b.b_qkv.len(), 3 * d)?;
            check(&name("attn.c_proj.weight"), b.w_attn_out.shape(), (d, d))?;
            check_len(&name("attn.c_proj.bias"), b.b_attn_out.len(), d)?;
            check_len(&name("ln_2.weight"), b.ln2.gamma.len(), d)?;
            check_len(&name("ln_2.bias"), b.ln2.beta.len(), d)?;
            check(&name("mlp.c_fc.weight"), b.w_fc.shape(), (d, c.d_mlp))?;
            check_len(&name("mlp.c_fc.bias"), b.b_fc.len(), c.d_mlp)?;
            check(&name("mlp.c_proj.weight"), b.w_proj.shape(), (c.d_mlp, d))?;
            check_len(&name("mlp.c_proj.bias"), b.b_proj.len(), d)?;
        }
        check_len("ln_f.weight", self.ln_f.gamma.len(), d)?;
        check_len("ln_f.bias", self.ln_f.beta.len(), d)?;
        Ok(())
    }

    /// `‖W_proj[n, :]‖₂` for every neuron of `layer`.
    pub fn proj_column_norms(&self, layer: usize) -> Vec<f32> {
        self.blocks[layer].w_proj.rows_iter().map(crate::linalg::norm).collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig { n_layer: 2, n_head: 2, d_model: 8, d_mlp: 16, n_vocab: 20, n_ctx: 12, ln_eps: 1e-5 }
    }

    #[test]
    fn gpt2_small_checkpoint_has_148_tensors() {
        assert_eq!(ModelWeights::tensor_specs(&ModelConfig::GPT2_SMALL).len(), 148);
    }

    #[test]
    fn tensors_round_trip_and_missing_tensor_is_named() {
        let w = ModelWeights::random_init(tiny_config(), 7);
        let tensors: Vec<(String, Vec<usize>, Vec<f32>)> =
            w.to_tensors().into_iter().map(|(s, d)| (s.name, s.shape, d.to_vec())).collect();
        let lookup = |skip: Option<&str>| {
            let tensors = tensors.clone();
            let skip = skip.map(String::from);
            move |name: &str| -> Result<Option<(Vec<usize>, Vec<f32>)>> {
                if skip.as_deref() == Some(name) {
                    return Ok(None);
                }
                Ok(tensors.iter().find(|t| t.0 == name).map(|t| (t.1.clone(), t.2.clone())))
            }
        };
        let back = ModelWeights::from_tensors(tiny_config(), WeightLayout::Conv1D, lookup(None)).unwrap();
        assert_eq!(back, w);
        let err = ModelWeights::from_tensors(tiny_config(), WeightLayout::Conv1D, lookup(Some("h.1.mlp.c_fc.bias")))
            .unwrap_err();
        assert_eq!(err, Error::Weights("missing tensor h.1.mlp.c_fc.bias".into()));
    }

    #[test]
    fn linear_layout_is_transposed_on_load() {
        let w = ModelWeights::random_init(tiny_config(), 3);
        let tensors: Vec<(TensorSpec, Vec<f32>)> = w
            .to_tensors()
            .into_iter()
            .map(|(s, d)| {
                if s.projection {
                    let m = Matrix::from_vec(s.shape[0], s.shape[1], d.to_vec()).unwrap().transpose();
                    let spec = TensorSpec { shape: alloc::vec![s.shape[1], s.shape[0]], ..s };
                    (spec, m.into_vec())
                } else {
                    (s, d.to_vec())
                }
            })
            .collect();
        let back = ModelWeights::from_tensors(tiny_config(), WeightLayout::Linear, |name| {
            Ok(tensors.iter().find(|t| t.0.name == name).map(|t| (t.0.shape.clone(), t.1.clone())))
        })
        .unwrap();
        assert_eq!(back, w);
        // Square matrices are ambiguous, but rectangular ones in the wrong layout are caught.
        let err = ModelWeights::from_tensors(tiny_config(), WeightLayout::Conv1D, |name| {
            Ok(tensors.iter().find(|t| t.0.name == name).map(|t| (t.0.shape.clone(), t.1.clone())))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Weights(msg) if msg.contains("c_attn.weight")));
    }
}
