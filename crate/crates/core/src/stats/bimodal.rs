use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{input, Error, Result};

pub const DEFAULT_BIN_WIDTH: f64 = 0.05;

/// Smallest share of the sample each side of the split must hold, which
/// keeps isolated tail bins from counting as modes.
pub const MIN_MODE_MASS: f64 = 0.01;

/// Fixed-width histogram anchored at the sample minimum. Bin `i` covers
/// `[min + i·w, min + (i+1)·w)`; the sample maximum falls in the last bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub min: f64,
    pub width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: &[f64], width: f64) -> Result<Self> {
        if width.is_nan() || width <= 0.0 {
            return Err(input("bin width must be positive"));
        }
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(input("histogram needs finite values"));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let nbins = ((max - min) / width) as usize + 1;
        let mut counts = vec![0u64; nbins];
        for &v in values {
            let i = (((v - min) / width) as usize).min(nbins - 1);
            counts[i] += 1;
        }
        Ok(Self { min, width, counts })
    }

    pub fn center(&self, bin: usize) -> f64 {
        self.min + (bin as f64 + 0.5) * self.width
    }

    /// Bins higher than their left neighbour and at least as high as their
    /// right neighbour (so a plateau counts once, at its left edge).
    pub fn peaks(&self) -> Vec<usize> {
        let c = &self.counts;
        (0..c.len())
            .filter(|&i| c[i] > 0 && (i == 0 || c[i] > c[i - 1]) && (i + 1 == c.len() || c[i] >= c[i + 1]))
            .collect()
    }
}

/// Threshold between the two modes of a bimodal sample: the centre of the
/// lowest bin between them (the middle one if several tie).
///
/// The first mode is the highest histogram peak. The second is the highest
/// other peak whose valley to the first dips to at most half the smaller
/// of the two peak heights and leaves at least [`MIN_MODE_MASS`] of the
/// sample on each side of the split.
pub fn bimodal_threshold(values: &[f64], bin_width: f64) -> Result<f64> {
    if values.len() < 1000 {
        return Err(input(format!("bimodality needs at least 1000 samples, got {}", values.len())));
    }
    Histogram::new(values, bin_width)?.split()
}

impl Histogram {
    /// The split rule of [`bimodal_threshold`] applied to an already binned
    /// sample.
    pub fn split(&self) -> Result<f64> {
        let c = &self.counts;
        let total: u64 = c.iter().sum();
        let peaks = self.peaks();
        let &first = peaks
            .iter()
            .max_by(|a, b| c[**a].cmp(&c[**b]).then(b.cmp(a)))
            .ok_or_else(|| Error::NotBimodal("empty histogram".into()))?;
        let mut others: Vec<usize> = peaks.into_iter().filter(|&p| p != first).collect();
        others.sort_by(|a, b| c[*b].cmp(&c[*a]).then(a.cmp(b)));
        for second in others {
            let (lo, hi) = if second < first { (second, first) } else { (first, second) };
            if hi - lo < 2 {
                continue;
            }
            let valley = *c[lo + 1..hi].iter().min().expect("bins between peaks");
            if valley as f64 > 0.5 * c[first].min(c[second]) as f64 {
                continue;
            }
            let minima: Vec<usize> = (lo + 1..hi).filter(|&i| c[i] == valley).collect();
            let cut = minima[minima.len() / 2];
            let below: u64 = c[..cut].iter().sum();
            let above: u64 = c[cut + 1..].iter().sum();
            let floor = MIN_MODE_MASS * total as f64;
            if below as f64 >= floor && above as f64 >= floor {
                return Ok(self.center(cut));
            }
        }
        Err(Error::NotBimodal(format!("no second mode separated from the peak at {:.3}", self.center(first))))
    }
}
