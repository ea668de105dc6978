use alloc::vec;
use alloc::vec::Vec;

use super::special::{normal_cdf, student_t_two_sided};
use crate::error::{input, Error, Result};

/// Largest number of non-zero differences for which the exact null
/// distribution is used.
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wilcoxon {
    /// `min(W+, W−)` over ranks of the non-zero differences.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub p_two_sided: f64,
    pub exact: bool,
}

/// Wilcoxon signed-rank test on differences `second − first`.
///
/// Zero differences are dropped and tied magnitudes get midranks. With at
/// most [`WILCOXON_EXACT_MAX`] non-zero differences the p-value is exact
/// (the null distribution of the rank sum is counted over all sign
/// assignments of the observed ranks); beyond that a tie-corrected normal
/// approximation with continuity correction is used.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<Wilcoxon> {
    let mut diffs: Vec<f64> = pairs.iter().map(|(a, b)| b - a).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(input("non-finite difference"));
    }
    if diffs.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    if diffs.len() < 5 {
        return Err(input(alloc::format!("need at least 5 non-zero differences, got {}", diffs.len())));
    }
    diffs.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let n = diffs.len();
    // Doubled midranks keep tied ranks integral.
    let mut rank2 = vec![0u64; n];
    let mut tie_term = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        let r2 = (i + 1 + j + 1) as u64;
        rank2[i..=j].fill(r2);
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w_plus2: u64 = diffs.iter().zip(&rank2).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total2: u64 = rank2.iter().sum();
    let w_minus2 = total2 - w_plus2;
    let w2 = w_plus2.min(w_minus2);
    let (p, exact) = if n <= WILCOXON_EXACT_MAX {
        // counts[s] = number of sign assignments whose positive doubled-rank sum is s
        let mut counts = vec![0u64; total2 as usize + 1];
        counts[0] = 1;
        let mut reach = 0usize;
        for &r in &rank2 {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] > 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let le: u64 = counts[..=w2 as usize].iter().sum();
        ((2.0 * le as f64 / (1u64 << n) as f64).min(1.0), true)
    } else {
        (normal_approx_p(w2 as f64 / 2.0, n, tie_term), false)
    };
    Ok(Wilcoxon {
        w: w2 as f64 / 2.0,
        w_plus: w_plus2 as f64 / 2.0,
        w_minus: w_minus2 as f64 / 2.0,
        n,
        p_two_sided: p,
        exact,
    })
}

/// Two-sided normal-approximation p for the min rank sum `w`, with
/// `tie_term = Σ (t³ − t)` over groups of tied magnitudes.
fn normal_approx_p(w: f64, n: usize, tie_term: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w - mean + 0.5).min(0.0) / libm::sqrt(var);
    (2.0 * normal_cdf(z)).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedT {
    pub t: f64,
    pub df: usize,
    pub mean_diff: f64,
    pub p_two_sided: f64,
}

/// Paired t-test on differences `second − first`. The p-value comes from the
/// regularised incomplete beta function and is accurate to about 1e-10.
pub fn paired_t_test(pairs: &[(f64, f64)]) -> Result<PairedT> {
    let n = pairs.len();
    if n < 2 {
        return Err(input("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = pairs.iter().map(|(a, b)| b - a).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let t = mean / libm::sqrt(var / n as f64);
    let df = n - 1;
    Ok(PairedT { t, df, mean_diff: mean, p_two_sided: student_t_two_sided(t, df as f64) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs_from_diffs(d: &[f64]) -> Vec<(f64, f64)> {
        d.iter().map(|x| (0.0, *x)).collect()
    }

    /// Two-sided p by enumerating all 2^n sign flips of the observed ranks.
    fn brute_force_p(d: &[f64]) -> (f64, f64) {
        let nz: Vec<f64> = d.iter().copied().filter(|x| *x != 0.0).collect();
        let n = nz.len();
        let ranks: Vec<f64> = nz
            .iter()
            .map(|x| {
                let less = nz.iter().filter(|y| y.abs() < x.abs()).count() as f64;
                let eq = nz.iter().filter(|y| y.abs() == x.abs()).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect();
        let total: f64 = ranks.iter().sum();
        let wp: f64 = nz.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
        let w = wp.min(total - wp);
        let mut le = 0u64;
        for mask in 0..(1u64 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s <= w + 1e-9 {
                le += 1;
            }
        }
        (w, (2.0 * le as f64 / (1u64 << n) as f64).min(1.0))
    }

    #[test]
    fn six_differences_match_enumeration() {
        let d = [1.2, -0.4, 2.5, 0.9, -3.1, 0.7];
        let r = wilcoxon_signed_rank(&pairs_from_diffs(&d)).unwrap();
        let (w, p) = brute_force_p(&d);
        assert_eq!(r.w, w);
        assert!((r.p_two_sided - p).abs() < 1e-15);
        assert!(r.exact);
    }

    #[test]
    fn matches_reference_at_twenty() {
        // scipy.stats.wilcoxon: exact p = 0.023950576782226562, W = 45; with one
        // more difference of 3.3 the corrected normal approximation gives
        // p = 0.014972832904828096.
        let d = [
            1.5, -0.35, 2.2, 0.8, -1.1, 0.4, 3.0, -0.2, 1.7, 0.95, -0.6, 2.5, 0.05, 1.2, -0.9, 0.7, 1.9, -1.4, 0.3, 2.8,
        ];
        let r = wilcoxon_signed_rank(&pairs_from_diffs(&d)).unwrap();
        assert_eq!(r.w, 45.0);
        assert!((r.p_two_sided - 0.023950576782226562).abs() < 1e-12);
        let mut longer = d.to_vec();
        longer.push(3.3);
        let approx = wilcoxon_signed_rank(&pairs_from_diffs(&longer)).unwrap();
        assert!(!approx.exact);
        assert!((approx.p_two_sided - 0.014972832904828096).abs() < 1e-12);
    }

    #[test]
    fn symmetric_differences_are_not_significant() {
        let d = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0, 4.0, -4.0];
        let r = wilcoxon_signed_rank(&pairs_from_diffs(&d)).unwrap();
        assert_eq!(r.w, 18.0); // n(n+1)/4
        assert_eq!(r.p_two_sided, 1.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(wilcoxon_signed_rank(&[(1.0, 1.0); 8]), Err(Error::Degenerate(_))));
        assert!(wilcoxon_signed_rank(&pairs_from_diffs(&[1.0, 2.0, 0.0, 3.0, 4.0])).is_err());
        assert!(matches!(paired_t_test(&[(1.0, 2.0), (3.0, 4.0)]), Err(Error::Degenerate(_))));
        assert!(paired_t_test(&[(1.0, 2.0)]).is_err());
    }

    #[test]
    fn paired_t_by_hand() {
        // d = 1, 2, 6: mean 3, s² = (4 + 1 + 9) / 2 = 7, t = 3 / sqrt(7/3) = 1.963961012
        let r = paired_t_test(&[(0.0, 1.0), (1.0, 3.0), (2.0, 8.0)]).unwrap();
        assert!((r.t - 1.963961012123931).abs() < 1e-12);
        assert_eq!(r.df, 2);
        // symmetric noise around zero
        let r = paired_t_test(&pairs_from_diffs(&[0.1, -0.1, 0.2, -0.2, 0.05, -0.05])).unwrap();
        assert!(r.t.abs() < 1e-12 && (r.p_two_sided - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn exact_p_matches_enumeration(d in proptest::collection::vec(-4i32..=4, 5..=10)) {
            let d: Vec<f64> = d.into_iter().map(|x| x as f64).collect();
            prop_assume!(d.iter().filter(|x| **x != 0.0).count() >= 5);
            let r = wilcoxon_signed_rank(&pairs_from_diffs(&d)).unwrap();
            let (w, p) = brute_force_p(&d);
            prop_assert_eq!(r.w, w);
            prop_assert!((r.p_two_sided - p).abs() < 1e-12);
        }

        #[test]
        fn approximation_close_to_exact_at_twenty(perm in Just((1..=20).collect::<Vec<i32>>()).prop_shuffle(), signs in proptest::collection::vec(any::<bool>(), 20)) {
            let d: Vec<f64> = perm.iter().zip(&signs).map(|(m, s)| if *s { *m as f64 } else { -*m as f64 }).collect();
            let exact = wilcoxon_signed_rank(&pairs_from_diffs(&d)).unwrap();
            prop_assert!(exact.exact);
            prop_assert!((exact.p_two_sided - normal_approx_p(exact.w, 20, 0.0)).abs() < 0.01);
        }
    }
}
