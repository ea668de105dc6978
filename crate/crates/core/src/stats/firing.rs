use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{input, Error, Result};
use crate::linalg::{gelu, Matrix};

/// Fixed-length bit vector over token rows.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Mask {
    len: usize,
    words: Vec<u64>,
}

impl Mask {
    pub fn zeros(len: usize) -> Self {
        Self { len, words: vec![0; len.div_ceil(64)] }
    }

    pub fn from_bools(bits: impl IntoIterator<Item = bool>) -> Self {
        let mut m = Self::default();
        for b in bits {
            m.push(b);
        }
        m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, bit: bool) {
        if self.len % 64 == 0 {
            self.words.push(0);
        }
        if bit {
            self.words[self.len / 64] |= 1 << (self.len % 64);
        }
        self.len += 1;
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, bit: bool) {
        assert!(i < self.len);
        if bit {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn and_count(&self, other: &Mask) -> u64 {
        assert_eq!(self.len, other.len);
        self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones() as u64).sum()
    }

    pub fn or_count(&self, other: &Mask) -> u64 {
        assert_eq!(self.len, other.len);
        self.words.iter().zip(&other.words).map(|(a, b)| (a | b).count_ones() as u64).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.get(i))
    }

    /// Indices of set bits.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            core::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + b)
            })
        })
    }

    /// Appends the bits of `other`.
    pub fn extend(&mut self, other: &Mask) {
        if self.len % 64 == 0 {
            self.words.truncate(self.len / 64);
            self.words.extend_from_slice(&other.words);
            self.len += other.len;
            return;
        }
        for b in other.iter() {
            self.push(b);
        }
    }

    pub fn not(&self) -> Mask {
        let mut m = Mask { len: self.len, words: self.words.iter().map(|w| !w).collect() };
        if self.len % 64 != 0 {
            if let Some(last) = m.words.last_mut() {
                *last &= (1u64 << (self.len % 64)) - 1;
            }
        }
        m
    }
}

/// Where a token row came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TokenMeta {
    pub sequence: u32,
    pub position: u32,
    pub token: u32,
}

/// Tokens × neurons firing bits, `|GELU(x)| > θ`, stored column by column.
#[derive(Clone, Debug, PartialEq)]
pub struct FiringMatrix {
    theta: f32,
    columns: Vec<Mask>,
    meta: Vec<TokenMeta>,
}

impl FiringMatrix {
    pub fn new(neurons: usize, theta: f32) -> Self {
        Self { theta, columns: vec![Mask::default(); neurons], meta: Vec::new() }
    }

    /// All-zero matrix with the given rows, to be filled with [`Self::set`].
    pub fn zeros(meta: Vec<TokenMeta>, neurons: usize, theta: f32) -> Self {
        Self { theta, columns: vec![Mask::zeros(meta.len()); neurons], meta }
    }

    /// Appends one row per row of the pre-GELU activations `x`.
    pub fn push_activations(&mut self, x: &Matrix, meta: &[TokenMeta]) -> Result<()> {
        if x.cols() != self.columns.len() || x.rows() != meta.len() {
            return Err(input(format!(
                "activation block {:?} does not match {} neurons and {} metadata rows",
                x.shape(),
                self.columns.len(),
                meta.len()
            )));
        }
        for r in 0..x.rows() {
            for (col, &v) in self.columns.iter_mut().zip(x.row(r)) {
                col.push(gelu(v).abs() > self.theta);
            }
        }
        self.meta.extend_from_slice(meta);
        Ok(())
    }

    pub fn from_activations(x: &Matrix, meta: &[TokenMeta], theta: f32) -> Result<Self> {
        let mut m = Self::new(x.cols(), theta);
        m.push_activations(x, meta)?;
        Ok(m)
    }

    /// Builds the matrix for `layer` from traces that kept its pre-GELU
    /// activations, numbering sequences in slice order.
    pub fn from_traces(traces: &[crate::model::Trace], layer: usize, theta: f32) -> Result<Self> {
        let first = traces.first().ok_or_else(|| input("no traces"))?;
        let mut m = Self::new(first.mlp_pre(layer)?.cols(), theta);
        for (s, t) in traces.iter().enumerate() {
            let meta: Vec<TokenMeta> = t
                .tokens
                .iter()
                .enumerate()
                .map(|(p, &tok)| TokenMeta { sequence: s as u32, position: p as u32, token: tok })
                .collect();
            m.push_activations(t.mlp_pre(layer)?, &meta)?;
        }
        Ok(m)
    }

    pub fn tokens(&self) -> usize {
        self.meta.len()
    }

    pub fn neurons(&self) -> usize {
        self.columns.len()
    }

    pub fn theta(&self) -> f32 {
        self.theta
    }

    pub fn meta(&self) -> &[TokenMeta] {
        &self.meta
    }

    pub fn get(&self, token: usize, neuron: usize) -> bool {
        self.columns[neuron].get(token)
    }

    pub fn set(&mut self, token: usize, neuron: usize, bit: bool) {
        self.columns[neuron].set(token, bit)
    }

    pub fn column(&self, neuron: usize) -> &Mask {
        &self.columns[neuron]
    }

    pub fn fire_count(&self, neuron: usize) -> u64 {
        self.columns[neuron].count()
    }

    pub fn fire_rate(&self, neuron: usize) -> f64 {
        if self.tokens() == 0 {
            return 0.0;
        }
        self.fire_count(neuron) as f64 / self.tokens() as f64
    }

    /// `|A ∩ B| / |A ∪ B|`, zero when neither neuron fires.
    pub fn jaccard(&self, a: usize, b: usize) -> f64 {
        let union = self.columns[a].or_count(&self.columns[b]);
        if union == 0 {
            return 0.0;
        }
        self.columns[a].and_count(&self.columns[b]) as f64 / union as f64
    }

    /// Symmetric matrix of Jaccard similarities among `neurons`.
    pub fn pairwise_jaccard(&self, neurons: &[usize]) -> Vec<Vec<f64>> {
        let k = neurons.len();
        let mut out = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i..k {
                let v = self.jaccard(neurons[i], neurons[j]);
                out[i][j] = v;
                out[j][i] = v;
            }
        }
        out
    }

    /// Appends the rows of `other`, which must have the same neurons and
    /// threshold.
    pub fn append(&mut self, other: &FiringMatrix) -> Result<()> {
        if other.columns.len() != self.columns.len() || other.theta.to_bits() != self.theta.to_bits() {
            return Err(input("appended firing matrix differs in neurons or threshold"));
        }
        for (c, o) in self.columns.iter_mut().zip(&other.columns) {
            c.extend(o);
        }
        self.meta.extend_from_slice(&other.meta);
        Ok(())
    }

    /// Keeps the rows selected by `rows`.
    pub fn select_rows(&self, rows: &Mask) -> Self {
        let idx: Vec<usize> = rows.ones().collect();
        let columns = self.columns.iter().map(|c| Mask::from_bools(idx.iter().map(|&r| c.get(r)))).collect();
        Self { theta: self.theta, columns, meta: idx.iter().map(|&r| self.meta[r]).collect() }
    }
}

/// Jaccard of two independent columns firing at rates `p` and `q`.
pub fn independent_jaccard(p: f64, q: f64) -> f64 {
    let u = p + q - p * q;
    if u == 0.0 {
        0.0
    } else {
        p * q / u
    }
}

/// Tokens where the exception neuron's signed GELU output exceeds a
/// threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ExceptionRegime {
    pub mask: Mask,
    pub threshold: f32,
}

impl ExceptionRegime {
    /// From the neuron's pre-GELU activations.
    pub fn from_preactivations(x: impl IntoIterator<Item = f32>, threshold: f32) -> Self {
        Self { mask: Mask::from_bools(x.into_iter().map(|v| gelu(v) > threshold)), threshold }
    }

    pub fn rate(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.count() as f64 / self.mask.len() as f64
    }
}

/// `P(fire | regime)` for each listed neuron.
pub fn conditional_fire_rates(matrix: &FiringMatrix, regime: &Mask, neurons: &[usize]) -> Result<Vec<f64>> {
    if regime.len() != matrix.tokens() {
        return Err(input("regime mask is not aligned with the firing matrix"));
    }
    let n = regime.count();
    if n == 0 {
        return Err(Error::Degenerate("empty regime: conditional rate undefined".into()));
    }
    Ok(neurons.iter().map(|&k| matrix.column(k).and_count(regime) as f64 / n as f64).collect())
}

/// Number of `consensus` neurons firing at one token row.
pub fn consensus_level(matrix: &FiringMatrix, token: usize, consensus: &[usize]) -> u8 {
    consensus.iter().filter(|&&n| matrix.get(token, n)).count() as u8
}

/// [`consensus_level`] for every row.
pub fn consensus_levels(matrix: &FiringMatrix, consensus: &[usize]) -> Vec<u8> {
    let mut levels = vec![0u8; matrix.tokens()];
    for &n in consensus {
        for t in matrix.column(n).ones() {
            levels[t] += 1;
        }
    }
    levels
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(n: usize) -> Vec<TokenMeta> {
        (0..n).map(|p| TokenMeta { sequence: 0, position: p as u32, token: 0 }).collect()
    }

    #[test]
    fn bits_follow_gelu_threshold() {
        let x = Matrix::from_rows(&[&[-0.05, 0.2, -3.0], &[0.0, 5.0, -0.3]]).unwrap();
        let m = FiringMatrix::from_activations(&x, &meta(2), 0.1).unwrap();
        for t in 0..2 {
            for n in 0..3 {
                assert_eq!(m.get(t, n), gelu(x.get(t, n)).abs() > 0.1);
            }
        }
        let none = FiringMatrix::from_activations(&x, &meta(2), f32::INFINITY).unwrap();
        assert!((0..3).all(|n| none.fire_count(n) == 0));
    }

    #[test]
    fn jaccard_edge_cases() {
        let x = Matrix::from_rows(&[&[1.0, 1.0, 0.0, 1.0], &[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 0.0]]).unwrap();
        let m = FiringMatrix::from_activations(&x, &meta(3), 0.1).unwrap();
        assert_eq!(m.jaccard(0, 1), 1.0);
        assert_eq!(m.jaccard(2, 2), 0.0);
        assert_eq!(m.jaccard(0, 3), 0.5);
        let x = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(FiringMatrix::from_activations(&x, &meta(2), 0.1).unwrap().jaccard(0, 1), 0.0);
    }

    #[test]
    fn conditional_rates() {
        let x = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 1.0], &[0.0, 1.0], &[0.0, 0.0]]).unwrap();
        let m = FiringMatrix::from_activations(&x, &meta(4), 0.1).unwrap();
        let regime = Mask::from_bools([true, true, false, false]);
        assert_eq!(conditional_fire_rates(&m, &regime, &[0, 1]).unwrap(), vec![1.0, 0.5]);
        let all = Mask::from_bools([true; 4]);
        assert_eq!(conditional_fire_rates(&m, &all, &[0, 1]).unwrap(), vec![m.fire_rate(0), m.fire_rate(1)]);
        assert!(matches!(conditional_fire_rates(&m, &Mask::zeros(4), &[0]), Err(Error::Degenerate(_))));
        assert_eq!(consensus_levels(&m, &[0, 1]), vec![1, 2, 1, 0]);
        assert_eq!(consensus_level(&m, 1, &[0, 1]), 2);
    }

    #[test]
    fn regime_is_signed() {
        let r = ExceptionRegime::from_preactivations([3.0, -3.0, 0.5, 1.2], 1.0);
        assert_eq!(r.mask.iter().collect::<Vec<_>>(), vec![true, false, false, true]);
        assert_eq!(r.rate(), 0.5);
    }

    #[test]
    fn independent_columns_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        for (p, q) in [(0.95, 0.95), (0.3, 0.6)] {
            let a = Mask::from_bools((0..n).map(|_| rng.random::<f64>() < p));
            let b = Mask::from_bools((0..n).map(|_| rng.random::<f64>() < q));
            let j = a.and_count(&b) as f64 / a.or_count(&b) as f64;
            assert!((j - independent_jaccard(p, q)).abs() < 0.01);
        }
        assert!((independent_jaccard(0.95, 0.95) - 0.905).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn jaccard_symmetric_and_self_identity(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..300)) {
            let rows: Vec<[f32; 2]> = bits.iter().map(|(a, b)| [*a as u8 as f32, *b as u8 as f32]).collect();
            let x = Matrix::from_rows(&rows.iter().map(|r| &r[..]).collect::<Vec<_>>()).unwrap();
            let m = FiringMatrix::from_activations(&x, &meta(rows.len()), 0.1).unwrap();
            prop_assert_eq!(m.jaccard(0, 1), m.jaccard(1, 0));
            if m.fire_count(0) > 0 {
                prop_assert_eq!(m.jaccard(0, 0), 1.0);
            }
            let j = m.jaccard(0, 1);
            prop_assert!((0.0..=1.0).contains(&j));
        }

        #[test]
        fn append_equals_single_build(a in proptest::collection::vec(any::<bool>(), 0..150), b in proptest::collection::vec(any::<bool>(), 0..150)) {
            let mut m = Mask::from_bools(a.iter().copied());
            m.extend(&Mask::from_bools(b.iter().copied()));
            prop_assert_eq!(m, Mask::from_bools(a.iter().chain(&b).copied()));
        }

        #[test]
        fn mask_ops(bits in proptest::collection::vec(any::<bool>(), 0..200)) {
            let m = Mask::from_bools(bits.iter().copied());
            prop_assert_eq!(m.count() as usize, bits.iter().filter(|b| **b).count());
            prop_assert_eq!(m.ones().collect::<Vec<_>>(), bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect::<Vec<_>>());
            prop_assert_eq!(m.not().count() as usize, bits.len() - m.count() as usize);
        }
    }
}
