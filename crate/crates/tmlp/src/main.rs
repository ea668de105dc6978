use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tmlp::experiments::{self, Context, EXPERIMENTS};
use tmlp::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "tmlp", version, about = "Routing analysis of the GPT-2 Small final-layer MLP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the selected experiments and write reports plus a manifest.
    Run(ConfigArgs),
    /// Resolve and check a configuration, then print it as TOML.
    ValidateConfig(ConfigArgs),
    /// Print the token ids and pieces of a text (stdin when no text is given).
    Tokenize {
        #[arg(long)]
        text: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// List the available experiments.
    ListExperiments,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML file with configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Further `--key value` overrides, e.g. `--preset desk --workers 4`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let c = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        c.validate()?;
        Ok(c)
    }
}

fn run(args: &ConfigArgs) -> Result<i32> {
    let config = args.load()?;
    let selected = experiments::validate_selection(&config)?;
    let ctx = Context::load(&config, &selected)?;
    let outcome = experiments::run_selected(&ctx, &selected, &config.output_dir)?;
    for e in &outcome.manifest.reports {
        match &e.error {
            None => println!("{:<16} ok      {:>9.1}s", e.name, e.runtime_seconds),
            Some(err) => println!("{:<16} FAILED  {err}", e.name),
        }
    }
    println!("manifest: {}", config.output_dir.join("manifest.json").display());
    Ok(if outcome.failures > 0 { 1 } else { 0 })
}

fn validate(args: &ConfigArgs) -> Result<i32> {
    let config = args.load()?;
    experiments::validate_selection(&config)?;
    let text = toml::to_string(&config).map_err(|e| Error::Config(e.to_string()))?;
    print!("{text}");
    println!("# hash = {}", config.hash());
    Ok(0)
}

fn tokenize(text: Option<&str>, args: &ConfigArgs) -> Result<i32> {
    let config = args.load()?;
    let (Some(v), Some(m)) = (&config.vocab, &config.merges) else {
        return Err(Error::Config("tokenize needs `vocab` and `merges`".into()));
    };
    let vocab = tmlp::vocab::load_vocab(v, m)?;
    let text = match text {
        Some(t) => t.to_string(),
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).map_err(|e| Error::io(Path::new("<stdin>"), e))?;
            s
        }
    };
    for id in vocab.encode(&text) {
        let piece = vocab.token_bytes(id)?;
        println!("{id}\t{:?}", String::from_utf8_lossy(piece));
    }
    Ok(0)
}

fn list() -> Result<i32> {
    for e in EXPERIMENTS {
        let mut inputs = vec!["weights", "vocab"];
        if e.needs.corpus {
            inputs.push("corpus");
        }
        println!("{:<16} {:<52} [{}]", e.name, e.description, inputs.join(", "));
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run(a),
        Command::ValidateConfig(a) => validate(a),
        Command::Tokenize { text, config } => tokenize(text.as_deref(), config),
        Command::ListExperiments => list(),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
