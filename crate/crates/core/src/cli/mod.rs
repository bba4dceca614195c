//! The `xbtm` command line: one subcommand per pipeline step, all sharing a
//! JSON run config and a workdir.

mod commands;
mod config;
mod workdir;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use commands::{
    render_table, run, Command, EnsembleArgs, EnsembleMode, Outcome, PlanOutput, PplOutput,
};
pub use config::{
    apply_override, BudgetConfig, ClusteringConfig, CorpusConfig, EvalConfig, HmrConfig, HmrTarget,
    PathsConfig, RunConfig, TrainingConfig,
};
pub use workdir::{
    file_sha256, tree_sha256, Artifact, LockGuard, RunManifest, StepRecord, Workdir,
};

use crate::error::{Error, Result};

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for bad input: config, arguments, missing prerequisites, data.
pub const EXIT_USER: i32 = 1;
/// Exit status for internal failures.
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "xbtm",
    version,
    about = "Cluster a multilingual corpus, branch-train-merge expert language models, evaluate and adapt them",
    long_about = "Cluster a multilingual corpus, branch-train-merge expert language models, evaluate and adapt them.\n\n\
Steps run in order: ingest, cluster, plan, branch-train, merge, then any of eval-ppl, eval-ensemble, \
eval-forgetting, eval-icl, adapt-hmr, and finally report. Each step records its input fingerprint \
and artifacts in <workdir>/run.json and is skipped when nothing changed.\n\n\
Exit codes: 0 success, 1 user error, 2 internal error."
)]
pub struct Cli {
    /// Run config (JSON). Defaults to <workdir>/config.json from an earlier command.
    #[arg(long, short, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Working directory for artifacts. Falls back to paths.workdir in the config.
    #[arg(long, short, global = true, env = "XBTM_WORKDIR", value_name = "DIR")]
    pub workdir: Option<PathBuf>,

    /// Override a config field, e.g. `--set clustering.k=4`; the value is parsed as JSON, else taken as a string. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Re-run the step even when it is up to date.
    #[arg(long, global = true)]
    pub force: bool,

    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Read the JSONL corpus and make the train/valid split.
    Ingest,
    /// Fit the cluster model (typology tree cut or balanced TF-IDF k-means).
    Cluster,
    /// Split the token budget evenly across experts.
    Plan,
    /// Pretrain or load the seed, branch one expert per cluster and train them (plus the dense baseline).
    BranchTrain {
        /// Concurrent training jobs; results do not depend on it.
        #[arg(long, value_name = "N")]
        workers: Option<usize>,
    },
    /// Verify trained experts and write the expert set.
    Merge,
    /// Perplexity table over seed, dense and expert settings.
    EvalPpl,
    /// Per-language perplexity of the experts with explicit routing settings.
    EvalEnsemble {
        /// Route to the single covering expert or mix all experts.
        #[arg(long, value_enum, default_value_t = ModeArg::Ensemble)]
        mode: ModeArg,
        /// Routing temperature (default: routing.temperature).
        #[arg(long)]
        temperature: Option<f64>,
        /// Keep only the m heaviest experts per token (default: routing.top_m).
        #[arg(long = "top-m", value_name = "M")]
        top_m: Option<usize>,
        /// Recompute routing weights every this many tokens (default: routing.context_stride).
        #[arg(long, value_name = "TOKENS")]
        stride: Option<usize>,
    },
    /// Perplexity change of every expert on every language relative to the seed.
    EvalForgetting,
    /// Few-shot accuracy on the configured tasks.
    EvalIcl,
    /// Add experts for new languages, each branched from the expert of its nearest seen language.
    AdaptHmr {
        /// Concurrent training jobs; results do not depend on it.
        #[arg(long, value_name = "N")]
        workers: Option<usize>,
    },
    /// Write CSV/JSON report files from earlier evaluations, without running any model.
    Report,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Top1,
    Ensemble,
}

impl Cli {
    fn resolve(&self) -> Result<(Command, RunConfig, PathBuf)> {
        let mut overrides = self.overrides.clone();
        let command = match &self.command {
            CliCommand::Ingest => Command::Ingest,
            CliCommand::Cluster => Command::Cluster,
            CliCommand::Plan => Command::Plan,
            CliCommand::BranchTrain { workers } => {
                overrides.extend(workers.map(|n| format!("training.workers={n}")));
                Command::BranchTrain
            }
            CliCommand::Merge => Command::Merge,
            CliCommand::EvalPpl => Command::EvalPpl,
            CliCommand::EvalEnsemble {
                mode,
                temperature,
                top_m,
                stride,
            } => Command::EvalEnsemble(EnsembleArgs {
                mode: match mode {
                    ModeArg::Top1 => EnsembleMode::Top1,
                    ModeArg::Ensemble => EnsembleMode::Ensemble,
                },
                temperature: *temperature,
                top_m: *top_m,
                stride: *stride,
            }),
            CliCommand::EvalForgetting => Command::EvalForgetting,
            CliCommand::EvalIcl => Command::EvalIcl,
            CliCommand::AdaptHmr { workers } => {
                overrides.extend(workers.map(|n| format!("training.workers={n}")));
                Command::AdaptHmr
            }
            CliCommand::Report => Command::Report,
        };
        let config_path = match (&self.config, &self.workdir) {
            (Some(p), _) => p.clone(),
            (None, Some(w)) if w.join("config.json").exists() => w.join("config.json"),
            _ => {
                return Err(Error::Config {
                    path: "--config".into(),
                    message: "no config given and no config.json in the workdir".into(),
                })
            }
        };
        let cfg = RunConfig::load(&config_path, &overrides)?;
        let workdir = self
            .workdir
            .clone()
            .or_else(|| cfg.paths.workdir.clone())
            .ok_or_else(|| Error::Config {
                path: "paths.workdir".into(),
                message: "no workdir: pass --workdir, set XBTM_WORKDIR or paths.workdir".into(),
            })?;
        Ok((command, cfg, workdir))
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    let outcome = cli.resolve().and_then(|(command, cfg, workdir)| {
        let name = command.name();
        run(&command, &cfg, &workdir, cli.force).map(|o| (name, o))
    });
    match outcome {
        Ok((name, Outcome::UpToDate)) => {
            println!("{name}: up to date");
            EXIT_OK
        }
        Ok((name, Outcome::Ran { artifacts, summary })) => {
            print!("{summary}");
            println!("{name}: wrote {} artifacts", artifacts.len());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                EXIT_USER
            } else {
                EXIT_INTERNAL
            }
        }
    }
}
