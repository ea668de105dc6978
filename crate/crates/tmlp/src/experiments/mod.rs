//! Experiment registry, shared inputs and the run loop.
//!
//! Every experiment is a function from a [`Context`] to an
//! [`ExperimentReport`]. Per-sequence and per-prompt work runs on the
//! context's thread pool and is collected in input order, and every
//! aggregate is reduced sequentially afterwards, so reports do not depend
//! on the worker count.

mod controls;
mod garden_path;
mod knowledge;
mod lens;
mod reconstruct;
mod routing;
mod scan;
mod survey;

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use tmlp_core::{BpeVocab, ModelWeights, TierPartition};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::report::ExperimentReport;

pub use controls::{anticorrelation_spread, regime_rate_by_level, SweepPoint, MIN_LEVEL_TOKENS};
pub use garden_path::{read_sentence, Reading};
pub use knowledge::top_attributed;
pub use routing::{reidentify, ReidThresholds};
pub use scan::{Scan, VARIANTS};
pub use survey::{LayerSurvey, SURVEY_TOP_PARTNERS};

/// Inputs an experiment reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Needs {
    pub weights: bool,
    pub vocab: bool,
    pub corpus: bool,
}

const CORPUS: Needs = Needs { weights: true, vocab: true, corpus: true };
const PROMPTS: Needs = Needs { weights: true, vocab: true, corpus: false };

#[derive(Debug)]
pub struct Experiment {
    pub name: &'static str,
    pub description: &'static str,
    pub needs: Needs,
    run: fn(&Context) -> Result<ExperimentReport>,
}

pub const EXPERIMENTS: &[Experiment] = &[
    Experiment { name: "reconstruct", description: "tier sum against the direct MLP output", needs: CORPUS, run: reconstruct::run },
    Experiment { name: "tiers", description: "tier fire rates, co-firing, enrichment and norm shares", needs: CORPUS, run: routing::tiers },
    Experiment { name: "consensus_dp", description: "MLP effect on next-token probability by consensus level", needs: CORPUS, run: routing::consensus_dp },
    Experiment { name: "tier_ablation", description: "perplexity with each tier zeroed", needs: CORPUS, run: routing::tier_ablation },
    Experiment { name: "bos_attention", description: "final-layer attention to the first position", needs: CORPUS, run: routing::bos_attention },
    Experiment { name: "consensus_reid", description: "re-identification of the consensus neurons", needs: CORPUS, run: routing::consensus_reid },
    Experiment { name: "cross_layer", description: "exception structure at every layer", needs: CORPUS, run: survey::run },
    Experiment { name: "knowledge", description: "progressive rank of factual targets", needs: PROMPTS, run: knowledge::knowledge },
    Experiment { name: "progressive", description: "top-1 token after each tier stage", needs: PROMPTS, run: knowledge::progressive },
    Experiment { name: "kn_replication", description: "integrated-gradient neurons and their knockout", needs: PROMPTS, run: knowledge::kn_replication },
    Experiment { name: "transplant", description: "activation transplant between factual prompts", needs: PROMPTS, run: knowledge::transplant },
    Experiment { name: "garden_path", description: "surprisal and routing at garden-path disambiguation", needs: PROMPTS, run: garden_path::run },
    Experiment { name: "lens", description: "logit and tuned lens accuracy by layer", needs: CORPUS, run: lens::run },
    Experiment { name: "controls", description: "random-init null model and threshold sweep", needs: CORPUS, run: controls::run },
];

pub fn find(name: &str) -> Option<&'static Experiment> {
    EXPERIMENTS.iter().find(|e| e.name == name)
}

/// Resolves the selected names and checks that every input they need is
/// configured and every configured path exists.
pub fn validate_selection(config: &RunConfig) -> Result<Vec<&'static Experiment>> {
    let mut selected = Vec::new();
    for name in &config.experiments {
        let e = find(name).ok_or_else(|| {
            let known: Vec<&str> = EXPERIMENTS.iter().map(|e| e.name).collect();
            Error::Config(format!("unknown experiment {name:?}; known: {}", known.join(", ")))
        })?;
        if !selected.iter().any(|s: &&Experiment| s.name == e.name) {
            selected.push(e);
        }
    }
    let paths = [
        ("weights", &config.weights),
        ("vocab", &config.vocab),
        ("merges", &config.merges),
        ("corpus", &config.corpus),
        ("probes", &config.probes),
        ("knowledge_prompts", &config.knowledge_prompts),
        ("progressive_prompts", &config.progressive_prompts),
        ("kn_prompts", &config.kn_prompts),
        ("transplant_pairs", &config.transplant_pairs),
        ("garden_path_pairs", &config.garden_path_pairs),
    ];
    for (key, p) in paths {
        if let Some(p) = p {
            if !p.exists() {
                return Err(Error::Config(format!("{key} path {} does not exist", p.display())));
            }
        }
    }
    let needs = union(&selected);
    let require = |key: &str, p: &Option<std::path::PathBuf>| match p {
        Some(_) => Ok(()),
        None => Err(Error::Config(format!("selected experiments need `{key}`"))),
    };
    if needs.weights {
        require("weights", &config.weights)?;
    }
    if needs.vocab {
        require("vocab", &config.vocab)?;
        require("merges", &config.merges)?;
    }
    if needs.corpus {
        require("corpus", &config.corpus)?;
    }
    Ok(selected)
}

fn union(selected: &[&Experiment]) -> Needs {
    selected.iter().fold(Needs { weights: false, vocab: false, corpus: false }, |a, e| Needs {
        weights: a.weights || e.needs.weights,
        vocab: a.vocab || e.needs.vocab,
        corpus: a.corpus || e.needs.corpus,
    })
}

/// Everything an experiment reads: configuration, model, vocabulary,
/// corpus windows and the worker pool.
pub struct Context {
    pub config: RunConfig,
    pub weights: Option<ModelWeights>,
    pub vocab: Option<BpeVocab>,
    pub sequences: Vec<Vec<u32>>,
    pub partition: TierPartition,
    pool: rayon::ThreadPool,
    scan: Mutex<Option<Arc<Scan>>>,
}

impl Context {
    pub fn new(config: RunConfig, weights: Option<ModelWeights>, vocab: Option<BpeVocab>, sequences: Vec<Vec<u32>>) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Self { config, weights, vocab, sequences, partition: TierPartition::canonical(), pool, scan: Mutex::new(None) })
    }

    /// Loads the inputs the selected experiments need.
    pub fn load(config: &RunConfig, selected: &[&Experiment]) -> Result<Self> {
        let needs = union(selected);
        let weights = match (&config.weights, needs.weights) {
            (Some(p), true) => Some(crate::weights::load_weights(p)?),
            _ => None,
        };
        let vocab = match (&config.vocab, &config.merges, needs.vocab) {
            (Some(v), Some(m), true) => Some(crate::vocab::load_vocab(v, m)?),
            _ => None,
        };
        let sequences = match (&config.corpus, &vocab, needs.corpus) {
            (Some(c), Some(v), true) => {
                let s = crate::corpus::ingest_corpus(c, v, config.sequence_count, config.sequence_length)?;
                log::info!("corpus: {} sequences of {} tokens", s.len(), config.sequence_length);
                s
            }
            _ => Vec::new(),
        };
        Self::new(config.clone(), weights, vocab, sequences)
    }

    pub fn weights(&self) -> Result<&ModelWeights> {
        self.weights.as_ref().ok_or_else(|| Error::Config("no weights loaded".into()))
    }

    pub fn vocab(&self) -> Result<&BpeVocab> {
        self.vocab.as_ref().ok_or_else(|| Error::Config("no vocabulary loaded".into()))
    }

    /// The first `n` corpus windows (fewer if the corpus is shorter).
    pub fn sequences(&self, n: usize) -> Result<&[Vec<u32>]> {
        if self.sequences.is_empty() {
            return Err(Error::Config("no corpus loaded".into()));
        }
        Ok(&self.sequences[..n.min(self.sequences.len())])
    }

    /// Applies `f` to every item on the worker pool; results keep item order.
    pub fn par_map<I, T, F>(&self, items: &[I], f: F) -> Result<Vec<T>>
    where
        I: Sync,
        T: Send,
        F: Fn(usize, &I) -> Result<T> + Sync + Send,
    {
        self.pool.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect())
    }

    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    /// The shared pass over the corpus at the final layer, computed on first
    /// use.
    pub fn scan(&self) -> Result<Arc<Scan>> {
        let mut slot = self.scan.lock().expect("scan lock");
        if let Some(s) = slot.as_ref() {
            return Ok(s.clone());
        }
        let s = Arc::new(scan::run(self)?);
        *slot = Some(s.clone());
        Ok(s)
    }

    /// Runs one experiment and stamps the report with the config snapshot
    /// and runtime.
    pub fn run(&self, experiment: &Experiment) -> Result<ExperimentReport> {
        let start = Instant::now();
        log::info!("running {}", experiment.name);
        let mut report = (experiment.run)(self)
            .map_err(|e| Error::Experiment { name: experiment.name.into(), source: Box::new(e) })?;
        report.config_snapshot = self.config.snapshot();
        report.runtime_seconds = start.elapsed().as_secs_f64();
        log::info!("{} finished in {:.1}s", experiment.name, report.runtime_seconds);
        Ok(report)
    }
}

/// Outcome of a full run.
pub struct RunOutcome {
    pub manifest: crate::report::Manifest,
    pub failures: usize,
}

/// Runs the selected experiments and writes their reports plus the
/// manifest into `config.output_dir`.
pub fn run_selected(ctx: &Context, selected: &[&Experiment], out: &Path) -> Result<RunOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::new();
    let mut failures = 0;
    for e in selected {
        match ctx.run(e) {
            Ok(r) => {
                let files = r.write(out)?;
                entries.push(crate::report::ManifestEntry {
                    name: e.name.into(),
                    ok: true,
                    error: None,
                    runtime_seconds: r.runtime_seconds,
                    files,
                });
            }
            Err(err) => {
                log::error!("{err}");
                failures += 1;
                entries.push(crate::report::ManifestEntry {
                    name: e.name.into(),
                    ok: false,
                    error: Some(err.to_string()),
                    runtime_seconds: 0.0,
                    files: Vec::new(),
                });
            }
        }
    }
    let manifest = crate::report::Manifest {
        config_hash: ctx.config.hash(),
        config_snapshot: ctx.config.snapshot(),
        reports: entries,
    };
    manifest.write(out)?;
    Ok(RunOutcome { manifest, failures })
}

/// Mean of `values`, `None` when empty.
pub(crate) fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Median of `values`, `None` when empty.
pub(crate) fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_checks_names_and_inputs() {
        let mut c = RunConfig { experiments: vec!["nope".into()], ..RunConfig::default() };
        assert!(matches!(validate_selection(&c), Err(Error::Config(_))));
        c.experiments = vec!["knowledge".into(), "knowledge".into()];
        let err = validate_selection(&c).unwrap_err().to_string();
        assert!(err.contains("weights"), "{err}");
        c.weights = Some("/definitely/missing.safetensors".into());
        let err = validate_selection(&c).unwrap_err().to_string();
        assert!(err.contains("does not exist"), "{err}");
        c.experiments.clear();
        c.weights = None;
        assert!(validate_selection(&c).unwrap().is_empty());
    }

    #[test]
    fn registry_names_unique() {
        let mut names: Vec<&str> = EXPERIMENTS.iter().map(|e| e.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), EXPERIMENTS.len());
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(mean([1.0, 2.0]), Some(1.5));
        assert_eq!(mean([]), None);
    }
}
