use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

mod commands;
mod config;

use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "medmoco",
    version,
    about = "Contrastive pretraining and evaluation on synthetic CT phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the pretraining, downstream train and validation datasets.
    GenData(Common),
    /// Run contrastive pretraining.
    Pretrain(Common),
    /// Singular value spectrum of a checkpoint's representations.
    Diagnose {
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = ["pooled", "embedding"])]
        source: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Segmentation Dice of a checkpoint (random init when none is given).
    Evaluate {
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the four loss configurations per seed and evaluate each.
    Ablate(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file, last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Config(ConfigError),
    Runtime(medmoco::Error),
}

impl Failure {
    fn exit(self) -> ExitCode {
        let (line, code) = match self {
            Failure::Config(e) => (
                json!({"error": "config", "token": e.token, "message": e.message}),
                1,
            ),
            Failure::Runtime(e) => {
                let mut v = json!({"error": "runtime", "message": e.to_string()});
                if let medmoco::Error::Checkpoint(c) = &e {
                    v["code"] = json!(c.code());
                }
                (v, 2)
            }
        };
        eprintln!("{line}");
        ExitCode::from(code)
    }
}

fn resolve(common: &Common, extra: &[(&str, Option<String>)]) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for s in &common.set {
        cfg.apply_override(s)?;
    }
    for (k, v) in extra {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn clap_token(e: &clap::Error) -> String {
    for kind in [
        ContextKind::InvalidSubcommand,
        ContextKind::InvalidArg,
        ContextKind::InvalidValue,
    ] {
        if let Some(ContextValue::String(s)) = e.get(kind) {
            return s.clone();
        }
    }
    String::new()
}

fn run(argv: Vec<String>) -> ExitCode {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            let message = message
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            return Failure::Config(ConfigError {
                token: clap_token(&e),
                message,
            })
            .exit();
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let (common, extra, action): (&Common, Vec<_>, Action) = match &cli.command {
        Command::GenData(c) => (c, vec![], commands::gen_data),
        Command::Pretrain(c) => (c, vec![], commands::pretrain),
        Command::Diagnose {
            checkpoint,
            source,
            common,
        } => (
            common,
            vec![("checkpoint", path(checkpoint)), ("source", source.clone())],
            commands::diagnose,
        ),
        Command::Evaluate { checkpoint, common } => (
            common,
            vec![("checkpoint", path(checkpoint))],
            commands::evaluate,
        ),
        Command::Ablate(c) => (c, vec![], commands::ablate),
    };
    let cfg = match resolve(common, &extra) {
        Ok(cfg) => cfg,
        Err(e) => return Failure::Config(e).exit(),
    };
    if matches!(cli.command, Command::Diagnose { .. }) && cfg.checkpoint().is_none() {
        return Failure::Config(ConfigError {
            token: "checkpoint".into(),
            message: "diagnose needs a checkpoint path".into(),
        })
        .exit();
    }
    let result =
        commands::prepare_run_dir(&common.out, &cfg).and_then(|()| action(&cfg, &common.out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => Failure::Runtime(e).exit(),
    }
}

type Action = fn(&RunConfig, &std::path::Path) -> medmoco::Result<()>;

fn main() -> ExitCode {
    run(std::env::args().collect())
}
