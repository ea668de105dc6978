//! Run configuration.
//!
//! Values are layered, later layers winning: built-in defaults, the preset,
//! a TOML file, `TMLP_<KEY>` environment variables, then command-line
//! `--key value` overrides. Keys are the field names of [`RunConfig`];
//! dashes on the command line stand for underscores.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::weights::sha256_hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `paper` (the defaults) or `desk`.
    pub preset: String,
    pub weights: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Pre-trained tuned-lens probes; trained from the corpus when absent.
    pub probes: Option<PathBuf>,
    /// Prompt and pair files; the bundled sets are used when absent.
    pub knowledge_prompts: Option<PathBuf>,
    pub progressive_prompts: Option<PathBuf>,
    pub kn_prompts: Option<PathBuf>,
    pub transplant_pairs: Option<PathBuf>,
    pub garden_path_pairs: Option<PathBuf>,
    /// Include the 150-prompt extension in the knowledge suite.
    pub knowledge_extension: bool,
    pub sequence_count: usize,
    pub sequence_length: usize,
    pub theta: f32,
    pub exception_threshold: f32,
    pub bin_width: f64,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub confidence: f64,
    pub reconstruct_tokens: usize,
    pub ppl_sequences: usize,
    pub survey_sequences: usize,
    pub lens_eval_sequences: usize,
    pub lens_train_sequences: usize,
    pub lens_learning_rate: f32,
    pub lens_epochs: usize,
    pub ig_steps: usize,
    pub control_seed: u64,
    pub sweep_thetas: Vec<f32>,
    pub experiments: Vec<String>,
    pub output_dir: PathBuf,
    /// Worker threads; 0 picks one per core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "paper".into(),
            weights: None,
            vocab: None,
            merges: None,
            corpus: None,
            probes: None,
            knowledge_prompts: None,
            progressive_prompts: None,
            kn_prompts: None,
            transplant_pairs: None,
            garden_path_pairs: None,
            knowledge_extension: true,
            sequence_count: 500,
            sequence_length: 1024,
            theta: 0.1,
            exception_threshold: 1.0,
            bin_width: 0.05,
            bootstrap_resamples: 10_000,
            bootstrap_seed: 42,
            confidence: 0.95,
            reconstruct_tokens: 10_000,
            ppl_sequences: 200,
            survey_sequences: 100,
            lens_eval_sequences: 200,
            lens_train_sequences: 100,
            lens_learning_rate: 1e-4,
            lens_epochs: 2,
            ig_steps: 20,
            control_seed: 0,
            sweep_thetas: vec![0.01, 0.05, 0.1, 0.25, 0.5, 1.0],
            experiments: Vec::new(),
            output_dir: PathBuf::from("reports"),
            workers: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "preset",
    "weights",
    "vocab",
    "merges",
    "corpus",
    "probes",
    "knowledge_prompts",
    "progressive_prompts",
    "kn_prompts",
    "transplant_pairs",
    "garden_path_pairs",
    "knowledge_extension",
    "sequence_count",
    "sequence_length",
    "theta",
    "exception_threshold",
    "bin_width",
    "bootstrap_resamples",
    "bootstrap_seed",
    "confidence",
    "reconstruct_tokens",
    "ppl_sequences",
    "survey_sequences",
    "lens_eval_sequences",
    "lens_train_sequences",
    "lens_learning_rate",
    "lens_epochs",
    "ig_steps",
    "control_seed",
    "sweep_thetas",
    "experiments",
    "output_dir",
    "workers",
];

const PATH_KEYS: &[&str] = &[
    "weights",
    "vocab",
    "merges",
    "corpus",
    "probes",
    "knowledge_prompts",
    "progressive_prompts",
    "kn_prompts",
    "transplant_pairs",
    "garden_path_pairs",
    "output_dir",
];

fn preset_table(name: &str) -> Result<Table> {
    let mut t = Table::new();
    match name {
        "paper" => {}
        "desk" => {
            for (k, v) in [
                ("sequence_count", 50),
                ("ppl_sequences", 50),
                ("survey_sequences", 20),
                ("lens_eval_sequences", 40),
                ("lens_train_sequences", 10),
            ] {
                t.insert(k.into(), Value::Integer(v));
            }
        }
        other => return Err(Error::Config(format!("unknown preset {other:?} (expected paper or desk)"))),
    }
    Ok(t)
}

/// Interprets an override string: TOML scalars and arrays where they parse,
/// comma lists for `experiments`, plain strings otherwise (and always for
/// path keys).
fn parse_value(key: &str, raw: &str) -> Value {
    if key == "experiments" {
        return Value::Array(raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| Value::String(s.into())).collect());
    }
    if PATH_KEYS.contains(&key) || key == "preset" {
        return Value::String(raw.into());
    }
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn check_key(key: &str, source: &str) -> Result<()> {
    if KEYS.contains(&key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown key {key:?} in {source}")))
    }
}

/// Overrides from `TMLP_<KEY>` variables. Variables not naming a key are
/// ignored.
pub fn env_layer(vars: impl IntoIterator<Item = (String, String)>) -> Table {
    let mut t = Table::new();
    for (name, value) in vars {
        if let Some(rest) = name.strip_prefix("TMLP_") {
            let key = rest.to_ascii_lowercase();
            if KEYS.contains(&key.as_str()) {
                t.insert(key.clone(), parse_value(&key, &value));
            }
        }
    }
    t
}

/// Overrides from `--key value` / `--key=value` arguments.
pub fn cli_layer(args: &[String]) -> Result<Table> {
    let mut t = Table::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let body = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key value, got {arg:?}")))?;
        let (key, raw) = match body.split_once('=') {
            Some((k, v)) => (k.replace('-', "_"), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("--{body} needs a value")))?;
                (body.replace('-', "_"), v.clone())
            }
        };
        check_key(&key, "command line")?;
        t.insert(key.clone(), parse_value(&key, &raw));
    }
    Ok(t)
}

pub fn file_layer(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let t: Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for k in t.keys() {
        check_key(k, &path.display().to_string())?;
    }
    Ok(t)
}

impl RunConfig {
    /// Resolves layers given lowest to highest precedence (file, env, cli).
    pub fn from_layers(layers: &[Table]) -> Result<Self> {
        let preset = layers
            .iter()
            .rev()
            .find_map(|l| l.get("preset"))
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| Error::Config("preset must be a string".into())))
            .transpose()?
            .unwrap_or_else(|| "paper".into());
        let mut merged = preset_table(&preset)?;
        for layer in layers {
            for (k, v) in layer {
                merged.insert(k.clone(), v.clone());
            }
        }
        merged.insert("preset".into(), Value::String(preset));
        merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    /// Config file (optional), process environment and command-line overrides.
    pub fn load(file: Option<&Path>, cli: &[String]) -> Result<Self> {
        let mut layers = Vec::new();
        if let Some(f) = file {
            layers.push(file_layer(f)?);
        }
        layers.push(env_layer(std::env::vars()));
        layers.push(cli_layer(cli)?);
        Self::from_layers(&layers)
    }

    /// Checks value ranges. Path existence is checked by
    /// [`crate::experiments::validate_selection`], which knows which inputs
    /// the selected experiments read.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=1024).contains(&self.sequence_length) {
            return bad(format!("sequence_length {} must be in 2..=1024", self.sequence_length));
        }
        if self.sequence_count == 0 {
            return bad("sequence_count must be positive".into());
        }
        if !(self.theta >= 0.0) || !self.exception_threshold.is_finite() {
            return bad("theta must be non-negative and exception_threshold finite".into());
        }
        if !(self.bin_width > 0.0) {
            return bad("bin_width must be positive".into());
        }
        if self.bootstrap_resamples == 0 || !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad("bootstrap needs resamples > 0 and confidence in (0, 1)".into());
        }
        if self.ig_steps == 0 {
            return bad("ig_steps must be positive".into());
        }
        if !(self.lens_learning_rate > 0.0) {
            return bad("lens_learning_rate must be positive".into());
        }
        if self.sweep_thetas.iter().any(|t| !(*t >= 0.0)) {
            return bad("sweep_thetas must be non-negative".into());
        }
        Ok(())
    }

    /// The settings that determine report contents: everything except the
    /// output location and the worker count.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
            obj.remove("workers");
        }
        v
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.snapshot().to_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn precedence_cli_over_env_over_file_over_preset() {
        let file: Table = "sequence_count = 7\ntheta = 0.5\nbootstrap_seed = 9".parse().unwrap();
        let env = env_layer([("TMLP_THETA".into(), "0.25".into()), ("TMLP_SCALE".into(), "paper".into())]);
        let cli = cli_layer(&args(&["--bootstrap-seed", "11", "--preset=desk"])).unwrap();
        let c = RunConfig::from_layers(&[file, env, cli]).unwrap();
        assert_eq!(c.sequence_count, 7);
        assert_eq!(c.theta, 0.25);
        assert_eq!(c.bootstrap_seed, 11);
        assert_eq!(c.preset, "desk");
        assert_eq!(c.survey_sequences, 20);
    }

    #[test]
    fn desk_preset_and_defaults() {
        let c = RunConfig::from_layers(&[cli_layer(&args(&["--preset", "desk"])).unwrap()]).unwrap();
        assert_eq!(c.sequence_count, 50);
        let d = RunConfig::from_layers(&[]).unwrap();
        assert_eq!(d, RunConfig::default());
        assert!(RunConfig::from_layers(&[cli_layer(&args(&["--preset", "huge"])).unwrap()]).is_err());
    }

    #[test]
    fn override_parsing() {
        let t = cli_layer(&args(&["--experiments", "reconstruct, tiers", "--weights", "1.0", "--sweep-thetas", "[0.1, 0.2]"])).unwrap();
        let c = RunConfig::from_layers(&[t]).unwrap();
        assert_eq!(c.experiments, vec!["reconstruct", "tiers"]);
        assert_eq!(c.weights, Some(PathBuf::from("1.0")));
        assert_eq!(c.sweep_thetas, vec![0.1, 0.2]);
        assert!(cli_layer(&args(&["--nope", "1"])).is_err());
        assert!(cli_layer(&args(&["--theta"])).is_err());
        assert!(RunConfig::from_layers(&[cli_layer(&args(&["--theta", "abc"])).unwrap()]).is_err());
    }

    #[test]
    fn validation_and_snapshot() {
        let mut c = RunConfig { sequence_length: 2048, ..RunConfig::default() };
        assert!(c.validate().is_err());
        c.sequence_length = 1024;
        assert!(c.validate().is_ok());
        let a = c.hash();
        c.workers = 16;
        c.output_dir = "elsewhere".into();
        assert_eq!(a, c.hash());
        c.theta = 0.2;
        assert_ne!(a, c.hash());
    }
}
