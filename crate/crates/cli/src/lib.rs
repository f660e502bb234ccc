//! The `nestdrug` command line.

pub mod charts;
mod commands;
pub mod config;
pub mod error;
pub mod manifest;
mod report;
mod selftest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, EXIT_OK, EXIT_USAGE};
use crate::manifest::{input_digests, read_manifest, versions, OutputDir, RunManifest, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "nestdrug", version, about = "Context-conditional activity modelling, benchmark audits and campaign replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Output directory; receives the primary outputs and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// JSON config merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set protocol.finetune.epochs=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed (same as --set seed=N).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Subcommand)]
enum Command {
    /// Generate a synthetic structured-shift dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Read an activity CSV into a normalized dataset.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Atom and bond feature statistics.
    Featurize {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Morgan fingerprints per record.
    Fp {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Leakage and structural-bias audit of an evaluation set against training data.
    Audit {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model for one phase.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["pretrain", "finetune", "continual"])]
        phase: String,
        /// Model directory to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-target metrics of a model on the test fold of a split plan.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Correct-versus-generic context ablation and fusion-variant sweep.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated context levels to ablate (l1, l2, l3).
        #[arg(long, default_value = "l1")]
        levels: String,
        /// Also fine-tune and score every configured fusion variant.
        #[arg(long)]
        fusion: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Few-shot adaptation of a fresh program embedding for one target.
    Fewshot {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: u32,
        #[command(flatten)]
        common: Common,
    },
    /// Replay a selection campaign over a labelled pool.
    Replay {
        #[arg(long)]
        data: PathBuf,
        /// Model directory for the model scorer.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Integrated-gradients atom attributions under one or more contexts.
    Attribute {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Semicolon-separated target,assay,round id triples.
        #[arg(long)]
        contexts: String,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize result CSVs into tables and charts.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in oracle and property checks.
    Selftest {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a command from its manifest into a new output directory.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Ingest { .. } => "ingest",
            Command::Featurize { .. } => "featurize",
            Command::Fp { .. } => "fp",
            Command::Audit { .. } => "audit",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Fewshot { .. } => "fewshot",
            Command::Replay { .. } => "replay",
            Command::Attribute { .. } => "attribute",
            Command::Report { .. } => "report",
            Command::Selftest { .. } => "selftest",
            Command::Rerun { .. } => "rerun",
        }
    }

    fn common_mut(&mut self) -> Option<&mut Common> {
        match self {
            Command::Synth { common }
            | Command::Ingest { common, .. }
            | Command::Featurize { common, .. }
            | Command::Fp { common, .. }
            | Command::Audit { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::Fewshot { common, .. }
            | Command::Replay { common, .. }
            | Command::Attribute { common, .. }
            | Command::Report { common, .. } => Some(common),
            Command::Selftest { .. } | Command::Rerun { .. } => None,
        }
    }

    /// Files and directories read by the command.
    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = match self {
            Command::Ingest { input, .. } => vec![input],
            Command::Featurize { data, .. } | Command::Fp { data, .. } | Command::Ablate { data, .. } => vec![data],
            Command::Audit { train, eval, .. } => vec![train, eval],
            Command::Train { data, init, .. } => std::iter::once(data.as_path()).chain(init.as_deref()).collect(),
            Command::Eval { model, data, .. } | Command::Fewshot { model, data, .. } | Command::Attribute { model, data, .. } => {
                vec![model, data]
            }
            Command::Replay { data, model, .. } => std::iter::once(data.as_path()).chain(model.as_deref()).collect(),
            Command::Report { results, .. } => vec![results],
            _ => vec![],
        };
        if let Some(Common { config: Some(c), .. }) = self.common() {
            v.push(c);
        }
        v
    }

    fn common(&self) -> Option<&Common> {
        match self {
            Command::Synth { common }
            | Command::Ingest { common, .. }
            | Command::Featurize { common, .. }
            | Command::Fp { common, .. }
            | Command::Audit { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::Fewshot { common, .. }
            | Command::Replay { common, .. }
            | Command::Attribute { common, .. }
            | Command::Report { common, .. } => Some(common),
            Command::Selftest { .. } | Command::Rerun { .. } => None,
        }
    }
}

/// What a command hands back to the driver.
pub(crate) struct Outcome {
    pub exit_code: i32,
    pub seeds: BTreeMap<String, u64>,
}

impl Outcome {
    pub fn ok(seeds: BTreeMap<String, u64>) -> Outcome {
        Outcome { exit_code: EXIT_OK, seeds }
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("nestdrug: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, argv: Vec<String>) -> CliResult<i32> {
    match command {
        Command::Selftest { out } => selftest::run(out.as_deref()),
        Command::Rerun { manifest, out } => rerun(&manifest, &out),
        cmd => {
            let common = cmd.common().expect("command with common arguments").clone();
            let mut config = RunConfig::resolve(common.config.as_deref(), &common.set)?;
            if let Some(s) = common.seed {
                config.seed = s;
            }
            execute(cmd, argv, config, None)
        }
    }
}

fn execute(cmd: Command, argv: Vec<String>, config: RunConfig, expect_inputs: Option<&BTreeMap<String, String>>) -> CliResult<i32> {
    let start = Instant::now();
    let mut inputs = BTreeMap::new();
    for p in cmd.inputs() {
        inputs.extend(input_digests(p)?);
    }
    if let Some(expected) = expect_inputs {
        for (path, digest) in expected {
            match inputs.get(path) {
                Some(d) if d == digest => {}
                Some(_) => return Err(CliError::Data(format!("input {path} changed since the manifest was written"))),
                None => return Err(CliError::Data(format!("input {path} from the manifest is missing"))),
            }
        }
        if let Some(extra) = inputs.keys().find(|p| !expected.contains_key(*p)) {
            return Err(CliError::Data(format!("input {extra} was not present when the manifest was written")));
        }
    }
    let common = cmd.common().expect("command with common arguments").clone();
    let mut out = OutputDir::create(&common.out)?;
    let outcome = commands::run(&cmd, &config, &mut out)?;
    let manifest = RunManifest {
        command: cmd.name().to_string(),
        argv,
        threads: config.workers(),
        config,
        seeds: outcome.seeds,
        inputs,
        outputs: out.outputs().clone(),
        versions: versions(),
        exit_code: outcome.exit_code,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(error::internal)?;
    text.push('\n');
    std::fs::write(out.path().join(MANIFEST_FILE), text)?;
    Ok(outcome.exit_code)
}

/// Re-executes the recorded command with the recorded resolved config,
/// writing into `out`.
fn rerun(manifest_path: &Path, out: &Path) -> CliResult<i32> {
    let m = read_manifest(manifest_path)?;
    let mut argv = vec![OsString::from("nestdrug")];
    argv.extend(m.argv.iter().map(OsString::from));
    let mut cli = Cli::try_parse_from(&argv).map_err(|e| CliError::Data(format!("manifest argv: {e}")))?;
    if matches!(cli.command, Command::Rerun { .. } | Command::Selftest { .. }) {
        return Err(CliError::Data(format!("manifest records '{}', which cannot be re-run", cli.command.name())));
    }
    let common = cli.command.common_mut().expect("command with common arguments");
    common.out = out.to_path_buf();
    common.config = None;
    // the resolved config replaces the config file, so its digest is not checked
    let mut inputs = m.inputs.clone();
    let recorded_config_files: Vec<PathBuf> = {
        let mut argv_iter = m.argv.iter();
        let mut v = Vec::new();
        while let Some(a) = argv_iter.next() {
            if a == "--config" {
                if let Some(p) = argv_iter.next() {
                    v.push(PathBuf::from(p));
                }
            } else if let Some(p) = a.strip_prefix("--config=") {
                v.push(PathBuf::from(p));
            }
        }
        v
    };
    for p in recorded_config_files {
        inputs.remove(&p.display().to_string());
    }
    execute(cli.command, m.argv.clone(), m.config.clone(), Some(&inputs))
}
