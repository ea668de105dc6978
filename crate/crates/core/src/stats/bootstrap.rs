use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{input, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapCI {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    /// Resamples requested.
    pub resamples: usize,
    /// Resamples whose statistic was undefined and therefore dropped.
    pub dropped: usize,
    pub seed: u64,
}

/// Linear-interpolation quantile of sorted data, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos as usize;
    let frac = pos - i as f64;
    if i + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[i] + frac * (sorted[i + 1] - sorted[i])
}

/// Fills `out` with the unit indices of resample `r`.
pub fn resample_indices(units: usize, seed: u64, r: usize, out: &mut [usize]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    for slot in out.iter_mut() {
        *slot = rng.random_range(0..units);
    }
}

/// Sequence-level percentile bootstrap of an arbitrary statistic.
///
/// `stat` receives the sampled unit indices (with repetition) and returns
/// `None` when the statistic is undefined for that resample. Resample `r`
/// draws its indices from a ChaCha8 stream keyed by `(seed, r)`, so each
/// resample is reproducible on its own, whatever order they are computed in.
pub fn bootstrap_ci_with<F>(units: usize, resamples: usize, seed: u64, confidence: f64, stat: F) -> Result<BootstrapCI>
where
    F: Fn(&[usize]) -> Option<f64>,
{
    if units < 2 {
        return Err(input("bootstrap needs at least two units"));
    }
    if resamples == 0 || !(0.0..1.0).contains(&confidence) || confidence <= 0.0 {
        return Err(input("bootstrap needs resamples > 0 and confidence in (0, 1)"));
    }
    let identity: Vec<usize> = (0..units).collect();
    let point = stat(&identity).ok_or_else(|| input("statistic undefined on the full sample"))?;
    let mut values = Vec::with_capacity(resamples);
    let mut idx = alloc::vec![0usize; units];
    for r in 0..resamples {
        resample_indices(units, seed, r, &mut idx);
        if let Some(v) = stat(&idx) {
            values.push(v);
        }
    }
    let dropped = resamples - values.len();
    if values.is_empty() {
        return Err(input("statistic undefined on every resample"));
    }
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    Ok(BootstrapCI {
        point,
        lo: percentile(&values, tail),
        hi: percentile(&values, 1.0 - tail),
        resamples,
        dropped,
        seed,
    })
}

/// Percentile bootstrap of the weighted mean `Σ w·s / Σ w` over units given
/// as `(weight, statistic)`. Resamples with zero total weight are dropped.
pub fn bootstrap_ci(values: &[(f64, f64)], resamples: usize, seed: u64, confidence: f64) -> Result<BootstrapCI> {
    bootstrap_ci_with(values.len(), resamples, seed, confidence, |idx| {
        let (mut sw, mut sws) = (0.0, 0.0);
        for &i in idx {
            sw += values[i].0;
            sws += values[i].0 * values[i].1;
        }
        (sw > 0.0).then(|| sws / sw)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn constant_data_gives_degenerate_interval() {
        let ci = bootstrap_ci(&[(3.0, 0.25), (1.0, 0.25), (7.0, 0.25)], 500, 42, 0.95).unwrap();
        assert_eq!((ci.point, ci.lo, ci.hi), (0.25, 0.25, 0.25));
    }

    #[test]
    fn two_units_match_enumeration() {
        // The four equally likely resamples of {0, 1} have means 0, ½, ½, 1,
        // so the 2.5% and 97.5% percentiles are 0 and 1.
        let ci = bootstrap_ci(&[(1.0, 0.0), (1.0, 1.0)], 10_000, 7, 0.95).unwrap();
        assert_eq!((ci.lo, ci.point, ci.hi), (0.0, 0.5, 1.0));
        // The middle 40% interval sits on ½.
        let ci = bootstrap_ci(&[(1.0, 0.0), (1.0, 1.0)], 10_000, 7, 0.4).unwrap();
        assert_eq!((ci.lo, ci.hi), (0.5, 0.5));
    }

    #[test]
    fn same_seed_same_interval_and_order_independence() {
        let data: Vec<(f64, f64)> = (0..50).map(|i| (1.0 + (i % 3) as f64, (i * 37 % 11) as f64)).collect();
        let a = bootstrap_ci(&data, 2000, 42, 0.95).unwrap();
        assert_eq!(a, bootstrap_ci(&data, 2000, 42, 0.95).unwrap());
        assert_ne!(a, bootstrap_ci(&data, 2000, 43, 0.95).unwrap());
        assert!(a.lo <= a.point && a.point <= a.hi);
        let draw = |r| {
            let mut v = vec![0; 50];
            resample_indices(50, 42, r, &mut v);
            v
        };
        let forward: Vec<Vec<usize>> = (0..20).map(draw).collect();
        let backward: Vec<Vec<usize>> = (0..20).rev().map(draw).collect();
        assert!(forward.iter().eq(backward.iter().rev()));
        assert_ne!(forward[0], forward[1]);
    }

    #[test]
    fn zero_weight_resamples_are_dropped() {
        let ci = bootstrap_ci(&[(0.0, 5.0), (0.0, 5.0), (1.0, 2.0)], 1000, 1, 0.95).unwrap();
        assert!(ci.dropped > 0);
        assert_eq!((ci.lo, ci.hi), (2.0, 2.0));
        assert!(bootstrap_ci(&[(1.0, 1.0)], 10, 1, 0.95).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 1.0), 4.0);
        assert_eq!(percentile(&[5.0], 0.3), 5.0);
    }
}
