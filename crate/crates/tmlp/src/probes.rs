//! Tuned-lens probes in the safetensors container: `probe.{i}.m` (`d × d`)
//! and `probe.{i}.b` (`d`), with `i = 0` reading the embedding.

use std::path::Path;

use safetensors::SafeTensors;
use tmlp_core::linalg::Matrix;
use tmlp_core::model::{AffineProbe, TunedLensProbes};

use crate::error::{Error, Result};
use crate::weights::{tensor_to_f32, write_f32_tensors};

pub fn save_probes(probes: &TunedLensProbes, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    for (i, p) in probes.probes.iter().enumerate() {
        let d = p.b.len();
        tensors.push((format!("probe.{i}.m"), vec![d, d], p.m.as_slice().to_vec()));
        tensors.push((format!("probe.{i}.b"), vec![d], p.b.clone()));
    }
    write_f32_tensors(path, tensors, None)
}

pub fn load_probes(path: &Path, count: usize, d: usize) -> Result<TunedLensProbes> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let fetch = |name: String, shape: &[usize]| -> Result<Vec<f32>> {
        let view = st.tensor(&name).map_err(|e| Error::Format(format!("{}: {name}: {e}", path.display())))?;
        if view.shape() != shape {
            return Err(Error::Format(format!("{name} has shape {:?}, expected {shape:?}", view.shape())));
        }
        tensor_to_f32(&view).map_err(|e| Error::Format(format!("{name}: {e}")))
    };
    let mut probes = Vec::with_capacity(count);
    for i in 0..count {
        let m = Matrix::from_vec(d, d, fetch(format!("probe.{i}.m"), &[d, d])?)?;
        let b = fetch(format!("probe.{i}.b"), &[d])?;
        probes.push(AffineProbe { m, b });
    }
    Ok(TunedLensProbes { probes })
}
