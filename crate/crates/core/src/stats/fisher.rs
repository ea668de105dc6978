use super::firing::{FiringMatrix, Mask};
use super::special::ln_choose;
use libm::{exp, log, log1p};

/// Per-neuron significance level after Bonferroni correction over 3072 tests.
pub const BONFERRONI_ALPHA: f64 = 0.05 / 3072.0;

/// 2×2 table of fire × regime counts.
///
/// ```text
///              regime   ¬regime
///   fire         a         b
///   ¬fire        c         d
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Contingency {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl Contingency {
    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    /// Row margin `a + b`, column margin `a + c`, total.
    fn margins(&self) -> (u64, u64, u64) {
        (self.a + self.b, self.a + self.c, self.total())
    }

    fn support(&self) -> (u64, u64) {
        let (k, n, total) = self.margins();
        ((k + n).saturating_sub(total), k.min(n))
    }

    /// `ln P(X = x)` for the hypergeometric law with this table's margins.
    pub fn ln_pmf(&self, x: u64) -> f64 {
        let (k, n, total) = self.margins();
        hypergeom_ln_pmf(total, k, n, x)
    }

    /// `ln P(X ≥ a)`, the one-sided test for enrichment of firing inside the
    /// regime.
    pub fn ln_upper_tail(&self) -> f64 {
        let (lo, hi) = self.support();
        if self.a <= lo {
            return 0.0;
        }
        let (k, n, total) = self.margins();
        let mode = ((n + 1) as f64 * (k + 1) as f64 / (total + 2) as f64) as u64;
        if self.a <= mode {
            let lower = exp(self.ln_tail_down(self.a - 1, lo));
            return log1p(-lower.min(1.0));
        }
        self.ln_tail_up(self.a, hi)
    }

    /// `ln P(X ≤ a)`.
    pub fn ln_lower_tail(&self) -> f64 {
        let (lo, hi) = self.support();
        if self.a >= hi {
            return 0.0;
        }
        let (k, n, total) = self.margins();
        let mode = ((n + 1) as f64 * (k + 1) as f64 / (total + 2) as f64) as u64;
        if self.a >= mode {
            let upper = exp(self.ln_tail_up(self.a + 1, hi));
            return log1p(-upper.min(1.0));
        }
        self.ln_tail_down(self.a, lo)
    }

    pub fn upper_tail(&self) -> f64 {
        exp(self.ln_upper_tail())
    }

    pub fn lower_tail(&self) -> f64 {
        exp(self.ln_lower_tail())
    }

    /// `ln Σ_{x = from}^{hi} P(X = x)`, summed relative to the first term
    /// with the pmf ratio recurrence and stopped once terms are negligible.
    fn ln_tail_up(&self, from: u64, hi: u64) -> f64 {
        let (k, n, total) = self.margins();
        let first = self.ln_pmf(from);
        let (mut term, mut sum) = (1.0f64, 1.0f64);
        let mut x = from;
        while x < hi {
            term *= ((k - x) as f64 * (n - x) as f64) / ((x + 1) as f64 * (total + x + 1 - k - n) as f64);
            sum += term;
            x += 1;
            if term < sum * 1e-18 {
                break;
            }
        }
        first + log(sum)
    }

    fn ln_tail_down(&self, from: u64, lo: u64) -> f64 {
        let (k, n, total) = self.margins();
        let first = self.ln_pmf(from);
        let (mut term, mut sum) = (1.0f64, 1.0f64);
        let mut x = from;
        while x > lo {
            term *= (x as f64 * (total + x - k - n) as f64) / ((k - x + 1) as f64 * (n - x + 1) as f64);
            sum += term;
            x -= 1;
            if term < sum * 1e-18 {
                break;
            }
        }
        first + log(sum)
    }
}

/// `ln P(X = x)` for `X ~ Hypergeometric(total, successes, draws)`.
pub fn hypergeom_ln_pmf(total: u64, successes: u64, draws: u64, x: u64) -> f64 {
    if x > successes || x > draws || draws - x > total - successes {
        return f64::NEG_INFINITY;
    }
    ln_choose(successes, x) + ln_choose(total - successes, draws - x) - ln_choose(total, draws)
}

/// One neuron's firing enrichment inside the regime.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Enrichment {
    pub table: Contingency,
    /// `P(fire)` over all tokens.
    pub base_rate: f64,
    /// `P(fire | regime)`.
    pub regime_rate: f64,
    /// `regime_rate / base_rate`; `None` when the neuron never fires.
    pub enrichment: Option<f64>,
    /// One-sided Fisher p-value.
    pub p: f64,
    pub log10_p: f64,
    pub significant: bool,
}

pub fn fisher_enrichment_counts(table: Contingency) -> Enrichment {
    let total = table.total();
    let base_rate = if total == 0 { 0.0 } else { (table.a + table.b) as f64 / total as f64 };
    let regime = table.a + table.c;
    let regime_rate = if regime == 0 { 0.0 } else { table.a as f64 / regime as f64 };
    let ln_p = table.ln_upper_tail();
    Enrichment {
        table,
        base_rate,
        regime_rate,
        enrichment: (base_rate > 0.0).then(|| regime_rate / base_rate),
        p: exp(ln_p),
        log10_p: ln_p / core::f64::consts::LN_10,
        significant: ln_p < log(BONFERRONI_ALPHA),
    }
}

pub fn fisher_enrichment(matrix: &FiringMatrix, regime: &Mask, neuron: usize) -> Enrichment {
    let col = matrix.column(neuron);
    let a = col.and_count(regime);
    let fire = col.count();
    let in_regime = regime.count();
    let total = matrix.tokens() as u64;
    fisher_enrichment_counts(Contingency { a, b: fire - a, c: in_regime - a, d: total + a - fire - in_regime })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    /// Probability of a table under fixed margins, by exact integer binomials.
    fn exact_pmf(t: &Contingency) -> f64 {
        fn choose(n: u64, k: u64) -> f64 {
            (0..k).fold(1.0f64, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
        }
        let (k, n, total) = (t.a + t.b, t.a + t.c, t.total());
        choose(k, t.a) * choose(total - k, n - t.a) / choose(total, n)
    }

    /// Every table sharing the margins of `t`, by enumeration.
    fn family(t: &Contingency) -> Vec<Contingency> {
        let (k, n, total) = (t.a + t.b, t.a + t.c, t.total());
        (0..=k.min(n))
            .filter(|&a| n - a <= total - k)
            .map(|a| Contingency { a, b: k - a, c: n - a, d: total + a - k - n })
            .collect()
    }

    #[test]
    fn unit_margins() {
        let t = Contingency { a: 1, b: 0, c: 0, d: 1 };
        assert!((t.upper_tail() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn all_small_tables_match_enumeration() {
        for a in 0..=12u64 {
            for b in 0..=12 - a {
                for c in 0..=12 - a - b {
                    for d in 0..=12 - a - b - c {
                        let t = Contingency { a, b, c, d };
                        let fam = family(&t);
                        let upper: f64 = fam.iter().filter(|x| x.a >= a).map(exact_pmf).sum();
                        let lower: f64 = fam.iter().filter(|x| x.a <= a).map(exact_pmf).sum();
                        assert!((t.upper_tail() - upper).abs() <= 1e-12, "{t:?}: {} vs {upper}", t.upper_tail());
                        assert!((t.lower_tail() - lower).abs() <= 1e-12, "{t:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn large_tables_match_reference() {
        // scipy.stats.fisher_exact([[30, 70], [10, 890]], alternative="greater")
        let t = Contingency { a: 30, b: 10, c: 70, d: 890 };
        let p = t.upper_tail();
        assert!((p - 4.9529197755223075e-24).abs() / 4.9529197755223075e-24 < 1e-9);
        // scipy.stats.hypergeom.logsf(299, 100000, 500, 600), far below f64 range once squared.
        let t = Contingency { a: 300, b: 200, c: 300, d: 99_200 };
        assert!((t.ln_upper_tail() - -1293.467888802637).abs() < 1e-8);
        let e = fisher_enrichment_counts(t);
        assert_eq!(e.p, 0.0);
        assert!(e.significant);
        assert!((e.log10_p - -1293.467888802637 / core::f64::consts::LN_10).abs() < 1e-8);
    }

    #[test]
    fn p_decreases_as_cell_exceeds_expectation() {
        let mut prev = 1.0 + 1e-12;
        for a in 0..=40u64 {
            let t = Contingency { a, b: 40 - a, c: 60 - a, d: 100 + a };
            let p = t.upper_tail();
            assert!(p > 0.0 && p <= 1.0 + 1e-12);
            assert!(p <= prev, "a={a}");
            prev = p;
        }
    }

    #[test]
    fn enrichment_fields() {
        let e = fisher_enrichment_counts(Contingency { a: 83, b: 537, c: 917, d: 8463 });
        assert!((e.base_rate - 0.062).abs() < 1e-12);
        assert!((e.regime_rate - 0.083).abs() < 1e-12);
        assert!((e.enrichment.unwrap() - 0.083 / 0.062).abs() < 1e-12);
        assert!(fisher_enrichment_counts(Contingency { a: 0, b: 0, c: 5, d: 5 }).enrichment.is_none());
    }
}
