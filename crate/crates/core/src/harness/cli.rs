//! Command-line surface. Precedence: built-in defaults, then the config
//! file, then `GRADSYNC_FUSION_THRESHOLD`, then flags.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::config::{ConfigError, ExperimentConfig, Mode, StrategyChoice};
use crate::collectives::{ExecMode, FUSION_THRESHOLD_ENV};

#[derive(Debug, Clone, Parser)]
#[command(
    name = "gradsync",
    version,
    about = "Sparse-vs-dense gradient exchange experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Legacy gather against a reduce path at one world size.
    Compare(Overrides),
    /// Weak-scaling sweep: fixed tokens per rank.
    Weak(Overrides),
    /// Strong-scaling sweep: fixed global tokens.
    Strong(Overrides),
}

impl Command {
    pub fn mode(&self) -> Mode {
        match self {
            Command::Compare(_) => Mode::Compare,
            Command::Weak(_) => Mode::WeakScaling,
            Command::Strong(_) => Mode::StrongScaling,
        }
    }

    pub fn overrides(&self) -> &Overrides {
        match self {
            Command::Compare(o) | Command::Weak(o) | Command::Strong(o) => o,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Single world size.
    #[arg(long, value_name = "N", conflicts_with = "ranks_list")]
    pub ranks: Option<usize>,
    /// Comma-separated, ascending world sizes.
    #[arg(long, value_name = "A,B,C", value_delimiter = ',')]
    pub ranks_list: Option<Vec<usize>>,
    /// legacy, dense, proposed or both.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long, value_name = "V")]
    pub vocab: Option<usize>,
    #[arg(long, value_name = "H")]
    pub hidden: Option<usize>,
    #[arg(long, value_name = "T", conflicts_with = "global_tokens")]
    pub tokens_per_rank: Option<usize>,
    #[arg(long, value_name = "G")]
    pub global_tokens: Option<usize>,
    #[arg(long, value_name = "S")]
    pub steps: Option<usize>,
    /// Fusion buffer size in bytes; 0 disables fusion.
    #[arg(long, value_name = "B")]
    pub fusion_threshold: Option<u64>,
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
    /// Directory for trace files.
    #[arg(long, value_name = "PATH")]
    pub trace_out: Option<PathBuf>,
    /// Report file; stdout when absent.
    #[arg(long, value_name = "PATH")]
    pub report_out: Option<PathBuf>,
    /// Emit the report as CSV instead of JSON.
    #[arg(long)]
    pub csv: bool,
    /// concurrent or serialized.
    #[arg(long)]
    pub exec_mode: Option<String>,
    /// Any config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Builds the effective config. `env_fusion` is the value of
/// `GRADSYNC_FUSION_THRESHOLD`, if set.
pub fn build_config(
    cmd: &Command,
    env_fusion: Option<&str>,
) -> Result<ExperimentConfig, ConfigError> {
    let mode = cmd.mode();
    let o = cmd.overrides();
    let mut cfg = ExperimentConfig::new(mode);
    if let Some(path) = &o.config {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::field("config", format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
        if cfg.mode != mode {
            return Err(ConfigError::field(
                "mode",
                format!(
                    "config file says `{}` but the command is `{}`",
                    cfg.mode.name(),
                    mode.name()
                ),
            ));
        }
    }
    if let Some(v) = env_fusion {
        cfg.set("fusion_threshold", v.trim())
            .map_err(|e| ConfigError::field(FUSION_THRESHOLD_ENV, e.message))?;
    }
    if let Some(n) = o.ranks {
        cfg.world_sizes = vec![n];
    }
    if let Some(list) = &o.ranks_list {
        cfg.world_sizes = list.clone();
    }
    if let Some(s) = &o.strategy {
        cfg.strategy = s
            .parse::<StrategyChoice>()
            .map_err(|m| ConfigError::field("strategy", m))?;
    }
    if let Some(v) = o.vocab {
        cfg.workload.vocab = v;
    }
    if let Some(v) = o.hidden {
        cfg.workload.hidden = v;
    }
    if let Some(v) = o.tokens_per_rank {
        cfg.workload.tokens_per_rank = v;
    }
    if let Some(v) = o.global_tokens {
        cfg.global_tokens = Some(v);
    }
    if let Some(v) = o.steps {
        cfg.steps = v;
    }
    if let Some(v) = o.fusion_threshold {
        cfg.fusion.threshold_bytes = v;
    }
    if let Some(v) = o.seed {
        cfg.workload.seed = v;
    }
    if let Some(p) = &o.trace_out {
        cfg.trace_out = Some(p.clone());
    }
    if let Some(p) = &o.report_out {
        cfg.report_out = Some(p.clone());
    }
    if o.csv {
        cfg.csv = true;
    }
    if let Some(m) = &o.exec_mode {
        cfg.exec_mode = m
            .parse::<ExecMode>()
            .map_err(|e| ConfigError::field("exec_mode", e))?;
    }
    for kv in &o.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(ConfigError::field(kv, "expected KEY=VALUE"));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}
