//! GPT-2 checkpoints in the safetensors container.
//!
//! Tensor names follow the released checkpoint (`wte.weight`,
//! `h.{i}.mlp.c_fc.weight`, ...), optionally under a `transformer.` prefix.
//! F32, F16 and BF16 tensors are accepted and widened to f32. Tensors the
//! model does not use (`lm_head.weight`, attention mask buffers) are ignored.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};
use tmlp_core::model::{ModelConfig, ModelWeights, WeightLayout};

use crate::error::{Error, Result};

const PREFIX: &str = "transformer.";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Little-endian tensor payload widened to f32.
pub fn tensor_to_f32(view: &TensorView<'_>) -> std::result::Result<Vec<f32>, String> {
    let data = view.data();
    match view.dtype() {
        Dtype::F32 => Ok(data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()),
        Dtype::F16 => Ok(data.chunks_exact(2).map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32()).collect()),
        Dtype::BF16 => Ok(data.chunks_exact(2).map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32()).collect()),
        other => Err(format!("unsupported dtype {other:?}")),
    }
}

/// Guesses the projection orientation from the first MLP input matrix.
pub fn detect_layout(st: &SafeTensors<'_>, prefix: &str, config: &ModelConfig) -> Result<WeightLayout> {
    let name = format!("{prefix}h.0.mlp.c_fc.weight");
    let view = st.tensor(&name).map_err(|e| Error::Format(format!("{name}: {e}")))?;
    match view.shape() {
        [r, c] if *r == config.d_model && *c == config.d_mlp => Ok(WeightLayout::Conv1D),
        [r, c] if *r == config.d_mlp && *c == config.d_model => Ok(WeightLayout::Linear),
        s => Err(Error::Format(format!("{name} has shape {s:?}, expected a {}x{} projection", config.d_model, config.d_mlp))),
    }
}

/// Parses GPT-2 Small weights from safetensors bytes.
pub fn weights_from_bytes(bytes: &[u8], config: ModelConfig, path: &Path) -> Result<ModelWeights> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| format_err(path, e))?;
    let names = st.names();
    let prefix = if names.iter().any(|n| n.starts_with(PREFIX)) { PREFIX } else { "" };
    let layout = detect_layout(&st, prefix, &config)?;
    log::info!("{}: {} tensors, layout {:?}, prefix {:?}", path.display(), names.len(), layout, prefix);
    let weights = ModelWeights::from_tensors(config, layout, |name| {
        let full = format!("{prefix}{name}");
        match st.tensor(&full) {
            Ok(view) => {
                let data = tensor_to_f32(&view).map_err(|e| tmlp_core::Error::Weights(format!("{full}: {e}")))?;
                Ok(Some((view.shape().to_vec(), data)))
            }
            Err(_) => Ok(None),
        }
    })?;
    Ok(weights)
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    log::info!("{}: sha256 {}", path.display(), sha256_hex(&bytes));
    weights_from_bytes(&bytes, ModelConfig::GPT2_SMALL, path)
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes named f32 tensors as a safetensors file.
pub fn write_f32_tensors(path: &Path, tensors: Vec<(String, Vec<usize>, Vec<f32>)>, metadata: Option<HashMap<String, String>>) -> Result<()> {
    let owned: Vec<(String, Vec<usize>, Vec<u8>)> = tensors.into_iter().map(|(n, s, d)| (n, s, f32_bytes(&d))).collect();
    let mut views = Vec::with_capacity(owned.len());
    for (name, shape, bytes) in &owned {
        let view = TensorView::new(Dtype::F32, shape.clone(), bytes).map_err(|e| format_err(path, e))?;
        views.push((name.clone(), view));
    }
    let buf = safetensors::serialize(views, metadata).map_err(|e| format_err(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Saves weights under the released tensor names, `Conv1D` orientation.
pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    let tensors = weights.to_tensors().into_iter().map(|(spec, data)| (spec.name, spec.shape, data.to_vec())).collect();
    write_f32_tensors(path, tensors, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_precision_widening() {
        let v = [1.5f32, -0.25, 3.0];
        let h: Vec<u8> = v.iter().flat_map(|x| half::f16::from_f32(*x).to_le_bytes()).collect();
        let view = TensorView::new(Dtype::F16, vec![3], &h).unwrap();
        assert_eq!(tensor_to_f32(&view).unwrap(), v);
        let b: Vec<u8> = v.iter().flat_map(|x| half::bf16::from_f32(*x).to_le_bytes()).collect();
        let view = TensorView::new(Dtype::BF16, vec![3], &b).unwrap();
        assert_eq!(tensor_to_f32(&view).unwrap(), v);
        let i: Vec<u8> = vec![0; 8];
        assert!(tensor_to_f32(&TensorView::new(Dtype::I64, vec![1], &i).unwrap()).is_err());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
