//! `reachped` command-line entry point.
//!
//! Every subcommand runs one pipeline stage inside the `out` directory.
//! Configuration comes from defaults, then `--config FILE`, then flags.
//! Success prints a JSON summary on stdout; failure prints a JSON error
//! object on stderr and exits non-zero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use reachped::config::{RunConfig, Source};
use reachped::pipeline::{self, Run};
use reachped::Error;

#[derive(Parser, Debug)]
#[command(name = "reachped", version, about = "Pedestrian reachability from learned behavior clusters")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Artifact directory (config key `out`).
    #[arg(long, global = true)]
    out: Option<String>,

    /// Seed for splitting, training and indexing (config key `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads, 0 = all cores (config key `threads`).
    #[arg(long, env = "REACHPED_THREADS", global = true)]
    threads: Option<usize>,

    /// Print every config key with its default and exit.
    #[arg(long)]
    list_keys: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a trajectory CSV, chunk, pad and split it.
    Ingest {
        /// Trajectory CSV (config key `input`).
        #[arg(long)]
        input: Option<String>,
    },
    /// Write the synthetic three-mode dataset and its label file.
    Synth,
    /// Train the encoder on the train split.
    Train,
    /// Cluster encoded and raw pooled features of the historical data.
    Cluster,
    /// Build nearest-neighbour indexes over both clusterings.
    Index,
    /// Evaluate every configured method on the test split.
    Eval {
        /// Comma-separated methods (config key `methods`).
        #[arg(long)]
        methods: Option<String>,
        /// Label CSV for external_labels (config key `labels`).
        #[arg(long)]
        labels: Option<String>,
    },
    /// Run the methods on the configured scenario chunks.
    Scenario {
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        labels: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Cluster => "cluster",
            Command::Index => "index",
            Command::Eval { .. } => "eval",
            Command::Scenario { .. } => "scenario",
        }
    }
}

fn build_config(cli: &Cli, command: &Command) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for pair in &cli.set {
        cfg.set_pair(pair, Source::Flag)?;
    }
    let mut flag = |key: &str, value: Option<String>| match value {
        Some(v) => cfg.set(key, &v, Source::Flag),
        None => Ok(()),
    };
    flag("out", cli.out.clone())?;
    flag("seed", cli.seed.map(|s| s.to_string()))?;
    flag("threads", cli.threads.map(|t| t.to_string()))?;
    match command {
        Command::Ingest { input } => flag("input", input.clone())?,
        Command::Eval { methods, labels } | Command::Scenario { methods, labels } => {
            flag("methods", methods.clone())?;
            flag("labels", labels.clone())?;
        }
        _ => {}
    }
    Ok(cfg)
}

fn to_json<T: Serialize>(value: &T) -> Result<serde_json::Value, Error> {
    Ok(serde_json::to_value(value)?)
}

fn execute(cli: &Cli, command: &Command) -> Result<serde_json::Value, Error> {
    let run = Run::new(build_config(cli, command)?)?;
    if run.settings.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(run.settings.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let summary = match command {
        Command::Ingest { .. } => to_json(&pipeline::ingest(&run)?)?,
        Command::Synth => to_json(&pipeline::synth(&run)?)?,
        Command::Train => to_json(&pipeline::train(&run)?)?,
        Command::Cluster => to_json(&pipeline::cluster(&run)?)?,
        Command::Index => to_json(&pipeline::index(&run)?)?,
        Command::Eval { .. } => to_json(&pipeline::eval(&run)?)?,
        Command::Scenario { .. } => to_json(&pipeline::scenario(&run)?)?,
    };
    Ok(json!({ "command": command.name(), "out": run.settings.out_dir, "summary": summary }))
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut obj = json!({ "error": e.kind(), "message": e.to_string() });
    if let Error::MissingArtifact { path, producer } = e {
        obj["path"] = json!(path);
        obj["producer"] = json!(producer);
    }
    obj
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.list_keys {
        for (key, default, help) in RunConfig::known_keys() {
            println!("{key} = {default}{}", if help.is_empty() { String::new() } else { format!("  # {help}") });
        }
        println!("scenario.<name> = <track_id>/<frame>");
        return ExitCode::SUCCESS;
    }
    let Some(command) = &cli.command else {
        eprintln!("{}", json!({ "error": "usage", "message": "no subcommand given; see --help" }));
        return ExitCode::from(2);
    };
    match execute(&cli, command) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable summary"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
