//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, list values are
//! comma-separated. Later lines override earlier ones.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::collectives::{ExecMode, FusionConfig, Strategy};
use crate::costmodel::{LinkModel, DEFAULT_ALPHA_US, DEFAULT_BANDWIDTH_BYTES_PER_S};
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, PartialEq, Error)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: `{}`: {}", self.field, self.message),
            None => write!(f, "`{}`: {}", self.field, self.message),
        }
    }
}

impl ConfigError {
    pub fn field(field: &str, message: impl Into<String>) -> Self {
        Self {
            line: None,
            field: field.to_owned(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Compare,
    WeakScaling,
    StrongScaling,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Compare => "compare",
            Mode::WeakScaling => "weak",
            Mode::StrongScaling => "strong",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "compare" => Ok(Mode::Compare),
            "weak" => Ok(Mode::WeakScaling),
            "strong" => Ok(Mode::StrongScaling),
            other => Err(format!(
                "unknown mode `{other}` (expected compare, weak or strong)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyChoice {
    One(Strategy),
    Both,
}

impl StrategyChoice {
    pub fn name(self) -> &'static str {
        match self {
            StrategyChoice::One(s) => s.name(),
            StrategyChoice::Both => "both",
        }
    }
}

impl FromStr for StrategyChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "both" {
            Ok(StrategyChoice::Both)
        } else {
            s.parse().map(StrategyChoice::One)
        }
    }
}

/// What strong scaling does when the global batch does not split evenly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemainderPolicy {
    Error,
    /// Round the per-rank batch up.
    Pad,
    /// Round the per-rank batch down.
    Drop,
}

impl RemainderPolicy {
    pub fn name(self) -> &'static str {
        match self {
            RemainderPolicy::Error => "error",
            RemainderPolicy::Pad => "pad",
            RemainderPolicy::Drop => "drop",
        }
    }
}

impl FromStr for RemainderPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "error" => Ok(RemainderPolicy::Error),
            "pad" => Ok(RemainderPolicy::Pad),
            "drop" => Ok(RemainderPolicy::Drop),
            other => Err(format!(
                "unknown remainder policy `{other}` (expected error, pad or drop)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub strategy: StrategyChoice,
    pub world_sizes: Vec<usize>,
    pub workload: WorkloadSpec,
    /// Strong scaling only: total tokens per step across all ranks.
    pub global_tokens: Option<usize>,
    pub remainder_policy: RemainderPolicy,
    /// Strong scaling warns when the per-rank batch drops below this.
    pub min_tokens_per_rank: usize,
    pub steps: usize,
    pub fusion: FusionConfig,
    pub link: LinkModel,
    /// Modeled local compute per token, microseconds.
    pub compute_us_per_token: f64,
    pub exec_mode: ExecMode,
    pub trace_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
    pub csv: bool,
}

impl ExperimentConfig {
    pub fn new(mode: Mode) -> Self {
        let world_sizes = match mode {
            Mode::Compare => vec![8],
            Mode::WeakScaling | Mode::StrongScaling => vec![1, 2, 4, 8, 16],
        };
        Self {
            mode,
            strategy: StrategyChoice::Both,
            world_sizes,
            workload: WorkloadSpec::default(),
            global_tokens: (mode == Mode::StrongScaling).then_some(16_384),
            remainder_policy: RemainderPolicy::Error,
            min_tokens_per_rank: 1024,
            steps: 1,
            fusion: FusionConfig::default(),
            link: LinkModel {
                alpha_us: DEFAULT_ALPHA_US,
                bandwidth_bytes_per_s: DEFAULT_BANDWIDTH_BYTES_PER_S,
            },
            compute_us_per_token: 1.0,
            exec_mode: ExecMode::Concurrent,
            trace_out: None,
            report_out: None,
            csv: false,
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let err = |m: String| ConfigError::field(key, m);
        fn num<T: FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
        }
        match key {
            "mode" => self.mode = value.parse().map_err(err)?,
            "strategy" => self.strategy = value.parse().map_err(err)?,
            "world_sizes" | "ranks" => {
                self.world_sizes = split_list(value)
                    .map(num::<usize>)
                    .collect::<Result<_, _>>()
                    .map_err(err)?
            }
            "vocab" => self.workload.vocab = num(value).map_err(err)?,
            "hidden" => self.workload.hidden = num(value).map_err(err)?,
            "tokens_per_rank" => self.workload.tokens_per_rank = num(value).map_err(err)?,
            "global_tokens" => self.global_tokens = Some(num(value).map_err(err)?),
            "extra_dense_vars" => {
                self.workload.extra_dense_vars = split_list(value)
                    .map(parse_shape)
                    .collect::<Result<_, _>>()
                    .map_err(err)?
            }
            "tied" => self.workload.tied = parse_bool(value).map_err(err)?,
            "dtype_width" => self.workload.dtype_width = num(value).map_err(err)?,
            "seed" => self.workload.seed = num(value).map_err(err)?,
            "steps" => self.steps = num(value).map_err(err)?,
            "fusion_threshold" => self.fusion.threshold_bytes = num(value).map_err(err)?,
            "alpha_us" => self.link.alpha_us = num(value).map_err(err)?,
            "bandwidth_bytes_per_s" => self.link.bandwidth_bytes_per_s = num(value).map_err(err)?,
            "compute_us_per_token" => self.compute_us_per_token = num(value).map_err(err)?,
            "min_tokens_per_rank" => self.min_tokens_per_rank = num(value).map_err(err)?,
            "remainder_policy" => self.remainder_policy = value.parse().map_err(err)?,
            "exec_mode" => self.exec_mode = value.parse().map_err(err)?,
            "trace_out" => self.trace_out = non_empty(value).map(PathBuf::from),
            "report_out" => self.report_out = non_empty(value).map(PathBuf::from),
            "csv" => self.csv = parse_bool(value).map_err(err)?,
            _ => return Err(err("unknown key".into())),
        }
        Ok(())
    }

    /// Applies a config file's text. Errors carry the 1-based line number.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (key, value, line) in parse_lines(text)? {
            self.set(&key, &value).map_err(|mut e| {
                e.line = Some(line);
                e
            })?;
        }
        Ok(())
    }

    pub fn from_text(mode: Mode, text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::new(mode);
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |f: &str, m: &str| Err(ConfigError::field(f, m));
        if self.world_sizes.is_empty() {
            return bad("world_sizes", "must not be empty");
        }
        if self.world_sizes.contains(&0) {
            return bad("world_sizes", "every world size must be >= 1");
        }
        if self.world_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("world_sizes", "must be strictly ascending");
        }
        if self.mode == Mode::Compare && self.world_sizes.len() != 1 {
            return bad("world_sizes", "compare runs exactly one world size");
        }
        if self.mode == Mode::Compare
            && self.strategy == StrategyChoice::One(Strategy::LegacyGather)
        {
            return bad(
                "strategy",
                "compare always runs legacy; choose dense, proposed or both",
            );
        }
        if self.steps == 0 {
            return bad("steps", "must be >= 1");
        }
        if self.workload.tokens_per_rank == 0 && self.mode != Mode::StrongScaling {
            return bad("tokens_per_rank", "must be >= 1");
        }
        if self.mode == Mode::StrongScaling {
            match self.global_tokens {
                None => return bad("global_tokens", "required for strong scaling"),
                Some(0) => return bad("global_tokens", "must be >= 1"),
                Some(g) if self.remainder_policy == RemainderPolicy::Error => {
                    if let Some(n) = self.world_sizes.iter().find(|&&n| g % n != 0) {
                        return Err(ConfigError::field(
                            "global_tokens",
                            format!(
                                "{g} is not divisible by world size {n}; set remainder_policy = pad or drop"
                            ),
                        ));
                    }
                }
                Some(_) => {}
            }
        }
        if !(self.link.alpha_us >= 0.0 && self.link.alpha_us.is_finite()) {
            return bad("alpha_us", "must be a finite non-negative number");
        }
        if !(self.link.bandwidth_bytes_per_s > 0.0 && self.link.bandwidth_bytes_per_s.is_finite()) {
            return bad("bandwidth_bytes_per_s", "must be a finite positive number");
        }
        if !(self.compute_us_per_token > 0.0 && self.compute_us_per_token.is_finite()) {
            return bad("compute_us_per_token", "must be a finite positive number");
        }
        self.workload
            .validate()
            .map_err(|e| ConfigError::field("workload", e.to_string()))
    }

    /// Effective settings as canonical `key -> value` text.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_owned(), v);
        };
        put("mode", self.mode.name().into());
        put("strategy", self.strategy.name().into());
        put("world_sizes", join(&self.world_sizes));
        put("vocab", self.workload.vocab.to_string());
        put("hidden", self.workload.hidden.to_string());
        put("tokens_per_rank", self.workload.tokens_per_rank.to_string());
        if let Some(g) = self.global_tokens {
            put("global_tokens", g.to_string());
        }
        put(
            "extra_dense_vars",
            self.workload
                .extra_dense_vars
                .iter()
                .map(|s| {
                    s.iter()
                        .map(|d| d.to_string())
                        .collect::<Vec<_>>()
                        .join("x")
                })
                .collect::<Vec<_>>()
                .join(","),
        );
        put("tied", self.workload.tied.to_string());
        put("dtype_width", self.workload.dtype_width.to_string());
        put("seed", self.workload.seed.to_string());
        put("steps", self.steps.to_string());
        put("fusion_threshold", self.fusion.threshold_bytes.to_string());
        put("alpha_us", self.link.alpha_us.to_string());
        put(
            "bandwidth_bytes_per_s",
            self.link.bandwidth_bytes_per_s.to_string(),
        );
        put(
            "compute_us_per_token",
            self.compute_us_per_token.to_string(),
        );
        put("min_tokens_per_rank", self.min_tokens_per_rank.to_string());
        put("remainder_policy", self.remainder_policy.name().into());
        put("exec_mode", self.exec_mode.name().into());
        put("csv", self.csv.to_string());
        if let Some(p) = &self.trace_out {
            put("trace_out", p.display().to_string());
        }
        if let Some(p) = &self.report_out {
            put("report_out", p.display().to_string());
        }
        m
    }

    /// Renders the settings as config-file text that parses back to `self`.
    pub fn render(&self) -> String {
        self.echo()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn non_empty(v: &str) -> Option<&str> {
    (!v.is_empty()).then_some(v)
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_shape(s: &str) -> Result<Vec<usize>, String> {
    s.split('x')
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .map_err(|e| format!("shape `{s}`: {e}"))
        })
        .collect()
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(format!("`{other}` is not a boolean")),
    }
}

/// Splits config text into `(key, value, line)` triples.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String, usize)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError {
                line: Some(i + 1),
                field: line.to_owned(),
                message: "expected `key = value`".into(),
            });
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(ConfigError {
                line: Some(i + 1),
                field: String::new(),
                message: "missing key".into(),
            });
        }
        out.push((key.to_owned(), v.trim().to_owned(), i + 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert_eq, proptest, Strategy as PropStrategy};

    #[test]
    fn parses_comments_and_lists() {
        let cfg = ExperimentConfig::from_text(
            Mode::WeakScaling,
            "# sweep\nworld_sizes = 2, 4,8  # trailing\nstrategy = legacy\nextra_dense_vars = 64x64,8x2x2\n\ntied = false\n",
        )
        .unwrap();
        assert_eq!(cfg.world_sizes, vec![2, 4, 8]);
        assert_eq!(cfg.strategy, StrategyChoice::One(Strategy::LegacyGather));
        assert_eq!(
            cfg.workload.extra_dense_vars,
            vec![vec![64, 64], vec![8, 2, 2]]
        );
        assert!(!cfg.workload.tied);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e =
            ExperimentConfig::from_text(Mode::Compare, "vocab = 8\n\nhidden = lots\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert_eq!(e.field, "hidden");
        let e = ExperimentConfig::from_text(Mode::Compare, "bogus = 1").unwrap_err();
        assert_eq!((e.line, e.field.as_str()), (Some(1), "bogus"));
        let e = ExperimentConfig::from_text(Mode::Compare, "vocab 8").unwrap_err();
        assert_eq!(e.line, Some(1));
    }

    #[test]
    fn validation_rules() {
        let mut c = ExperimentConfig::new(Mode::WeakScaling);
        c.world_sizes = vec![4, 2];
        assert_eq!(c.validate().unwrap_err().field, "world_sizes");
        let mut c = ExperimentConfig::new(Mode::StrongScaling);
        c.world_sizes = vec![1, 3];
        c.global_tokens = Some(16);
        assert_eq!(c.validate().unwrap_err().field, "global_tokens");
        c.remainder_policy = RemainderPolicy::Pad;
        assert!(c.validate().is_ok());
        let mut c = ExperimentConfig::new(Mode::Compare);
        c.world_sizes = vec![2, 4];
        assert!(c.validate().is_err());
    }

    fn config_strategy() -> impl PropStrategy<Value = ExperimentConfig> {
        (
            prop::sample::select(vec![Mode::Compare, Mode::WeakScaling, Mode::StrongScaling]),
            prop::collection::btree_set(1usize..64, 1..5),
            2usize..5000,
            1usize..512,
            any::<u64>(),
            0u64..1 << 30,
            prop::collection::vec(prop::collection::vec(1usize..50, 1..4), 0..3),
            any::<bool>(),
            0.0f64..100.0,
        )
            .prop_map(
                |(mode, worlds, vocab, hidden, seed, fusion, extra, tied, alpha)| {
                    let mut c = ExperimentConfig::new(mode);
                    c.world_sizes = worlds.into_iter().collect();
                    c.workload.vocab = vocab;
                    c.workload.hidden = hidden;
                    c.workload.seed = seed;
                    c.workload.extra_dense_vars = extra;
                    c.workload.tied = tied;
                    c.fusion.threshold_bytes = fusion;
                    c.link.alpha_us = alpha;
                    c
                },
            )
    }

    proptest! {
        #[test]
        fn render_parses_back(cfg in config_strategy()) {
            let back = ExperimentConfig::from_text(Mode::Compare, &cfg.render()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
