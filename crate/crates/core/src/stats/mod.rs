//! Firing statistics and the hypothesis tests used on them.

mod bimodal;
mod bootstrap;
mod firing;
mod fisher;
mod paired;
mod special;

pub use bimodal::{bimodal_threshold, Histogram, DEFAULT_BIN_WIDTH, MIN_MODE_MASS};
pub use bootstrap::{bootstrap_ci, bootstrap_ci_with, percentile, resample_indices, BootstrapCI};
pub use firing::{
    conditional_fire_rates, consensus_level, consensus_levels, independent_jaccard, ExceptionRegime, FiringMatrix,
    Mask, TokenMeta,
};
pub use fisher::{
    fisher_enrichment, fisher_enrichment_counts, hypergeom_ln_pmf, Contingency, Enrichment, BONFERRONI_ALPHA,
};
pub use paired::{paired_t_test, wilcoxon_signed_rank, PairedT, Wilcoxon, WILCOXON_EXACT_MAX};
pub use special::{ln_choose, normal_cdf, regularized_incomplete_beta, student_t_two_sided};
