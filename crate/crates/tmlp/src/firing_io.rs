//! Binary persistence of a [`FiringMatrix`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "TMLPFIRE"
//! version    u32      1
//! tokens     u64
//! neurons    u64
//! theta      f32
//! bits       tokens × ceil(neurons / 8) bytes, row-major; neuron n of a row
//!            is bit (n % 8) of byte (n / 8), least significant bit first
//! meta       tokens × (sequence u32, position u32, token u32)
//! ```

use std::io::{Read, Write};

use tmlp_core::stats::{FiringMatrix, TokenMeta};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TMLPFIRE";
const VERSION: u32 = 1;

pub fn write_firing<W: Write>(m: &FiringMatrix, mut w: W) -> std::io::Result<()> {
    let (tokens, neurons) = (m.tokens(), m.neurons());
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tokens as u64).to_le_bytes())?;
    w.write_all(&(neurons as u64).to_le_bytes())?;
    w.write_all(&m.theta().to_le_bytes())?;
    let stride = neurons.div_ceil(8);
    let mut bits = vec![0u8; tokens * stride];
    for n in 0..neurons {
        for t in m.column(n).ones() {
            bits[t * stride + n / 8] |= 1 << (n % 8);
        }
    }
    w.write_all(&bits)?;
    for meta in m.meta() {
        for v in [meta.sequence, meta.position, meta.token] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("firing matrix truncated: {e}")))?;
    Ok(buf)
}

pub fn read_firing<R: Read>(mut r: R) -> Result<FiringMatrix> {
    if &take::<8, _>(&mut r)? != MAGIC {
        return Err(Error::Format("not a firing matrix file".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported firing matrix version {version}")));
    }
    let tokens = u64::from_le_bytes(take(&mut r)?) as usize;
    let neurons = u64::from_le_bytes(take(&mut r)?) as usize;
    let theta = f32::from_le_bytes(take(&mut r)?);
    let stride = neurons.div_ceil(8);
    let mut bits = vec![0u8; tokens * stride];
    r.read_exact(&mut bits).map_err(|e| Error::Format(format!("firing matrix bits truncated: {e}")))?;
    let mut meta = Vec::with_capacity(tokens);
    for _ in 0..tokens {
        let sequence = u32::from_le_bytes(take(&mut r)?);
        let position = u32::from_le_bytes(take(&mut r)?);
        let token = u32::from_le_bytes(take(&mut r)?);
        meta.push(TokenMeta { sequence, position, token });
    }
    let mut m = FiringMatrix::zeros(meta, neurons, theta);
    for t in 0..tokens {
        for n in 0..neurons {
            if bits[t * stride + n / 8] >> (n % 8) & 1 == 1 {
                m.set(t, n, true);
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(neurons in 1usize..20, bits in proptest::collection::vec(any::<bool>(), 0..200), theta in 0.0f32..2.0) {
            let tokens = bits.len() / neurons;
            let meta: Vec<TokenMeta> =
                (0..tokens as u32).map(|i| TokenMeta { sequence: i / 7, position: i % 7, token: i * 31 }).collect();
            let mut m = FiringMatrix::zeros(meta, neurons, theta);
            for t in 0..tokens {
                for n in 0..neurons {
                    m.set(t, n, bits[t * neurons + n]);
                }
            }
            let mut buf = Vec::new();
            write_firing(&m, &mut buf).unwrap();
            prop_assert_eq!(read_firing(buf.as_slice()).unwrap(), m);
        }
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(read_firing(&b"NOTFIRE\0rest"[..]).is_err());
    }
}
