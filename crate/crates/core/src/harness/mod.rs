//! Experiment orchestration: byte/time comparisons, weak and strong
//! scaling sweeps, efficiency arithmetic and report emission.

mod cli;
mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

pub use cli::{build_config, Cli, Command, Overrides};
pub use config::{
    parse_lines, ConfigError, ExperimentConfig, Mode, RemainderPolicy, StrategyChoice,
};

use crate::collectives::{run_world, CollectiveError, CollectiveKind, CollectiveStats, Strategy};
use crate::costmodel::{
    build_memory_report, emit_trace, predict_gather_bytes, predict_reduce_bytes, CostError,
    MemoryReport, TraceEvent,
};
use crate::tensor::{materialize, DenseGrad, VarId};
use crate::workload::{gen_bundle, WorkloadSpec, TIED_VAR};

pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Upper end of the accepted efficiency range; a little super-linearity
/// is tolerated.
pub const MAX_EFFICIENCY: f64 = 1.05;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("collective aborted: {0}")]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("base world size {0} has no throughput")]
    MissingBase(usize),
    #[error("base world size {0} has non-positive throughput")]
    InvalidBase(usize),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl HarnessError {
    /// Process exit code: 2 for config errors, 3 for collective aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Collective(_) => 3,
            _ => 1,
        }
    }
}

/// Speedup and efficiency of one world size against the base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EfficiencyRow {
    pub world: usize,
    pub throughput: f64,
    pub speedup: f64,
    pub efficiency: f64,
}

/// `speedup(n) = T(n) / T(base)`, `efficiency(n) = speedup(n) / (n / base)`.
pub fn compute_efficiency(
    throughputs: &BTreeMap<usize, f64>,
    base: usize,
) -> Result<Vec<EfficiencyRow>, HarnessError> {
    let &t_base = throughputs
        .get(&base)
        .ok_or(HarnessError::MissingBase(base))?;
    if !(t_base > 0.0 && t_base.is_finite()) {
        return Err(HarnessError::InvalidBase(base));
    }
    Ok(throughputs
        .iter()
        .map(|(&world, &throughput)| {
            let speedup = throughput / t_base;
            EfficiencyRow {
                world,
                throughput,
                speedup,
                efficiency: speedup * base as f64 / world as f64,
            }
        })
        .collect())
}

/// One simulated world under one strategy.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub world: usize,
    pub strategy: Strategy,
    pub tokens_per_rank: usize,
    pub stats: Vec<CollectiveStats>,
    /// Rank 0's summed per-variable update, scaled by `1 / world`.
    pub update: Vec<(VarId, DenseGrad)>,
}

impl SimRun {
    pub fn virtual_us(&self) -> f64 {
        self.stats.iter().map(|s| s.clock_us).fold(0.0, f64::max)
    }

    pub fn tokens_total(&self, steps: usize) -> u64 {
        (self.tokens_per_rank * self.world * steps) as u64
    }

    pub fn bytes_for(&self, kind: CollectiveKind) -> u64 {
        self.stats[0].bytes_for(kind)
    }

    /// Every rank's trace events, in rank order.
    pub fn trace(&self) -> Vec<TraceEvent> {
        self.stats
            .iter()
            .flat_map(|s| s.events.iter().cloned())
            .collect()
    }
}

/// Runs the synthetic workload: per step, every rank models its compute,
/// draws its gradient contributions, accumulates them locally and joins
/// the bundle exchange.
pub fn simulate(
    cfg: &ExperimentConfig,
    world: usize,
    strategy: Strategy,
    tokens_per_rank: usize,
    pid: u32,
) -> Result<SimRun, HarnessError> {
    let spec = WorkloadSpec {
        tokens_per_rank,
        ..cfg.workload.clone()
    };
    spec.validate()
        .map_err(|e| ConfigError::field("workload", e.to_string()))?;
    let rule = strategy.local_rule();
    let compute_us = tokens_per_rank as f64 * cfg.compute_us_per_token;
    let run = run_world(world, cfg.exec_mode, cfg.link, pid, |group| {
        let ranks = group.ranks().to_vec();
        let mut totals: Vec<Vec<(VarId, DenseGrad)>> = vec![Vec::new(); ranks.len()];
        for step in 0..cfg.steps {
            let mut bundles = Vec::with_capacity(ranks.len());
            for (local, &rank) in ranks.iter().enumerate() {
                group.begin_span(local, "step");
                group.compute(local, "compute", compute_us);
                let grads = gen_bundle(&spec, rank, step)
                    .map_err(|e| CollectiveError::Abort(e.to_string()))?;
                bundles.push(grads.accumulate(rule)?);
            }
            let exchanged = group.exchange(bundles, strategy, cfg.fusion)?;
            for (local, bundle) in exchanged.iter().enumerate() {
                let acc = &mut totals[local];
                for (i, (id, g)) in bundle.iter().enumerate() {
                    let d = materialize(g);
                    match acc.get_mut(i) {
                        Some((_, t)) => {
                            for (a, b) in t.values_mut().iter_mut().zip(d.values()) {
                                *a += b;
                            }
                        }
                        None => acc.push((id.clone(), d)),
                    }
                }
                group.end_span(local, "step");
            }
        }
        Ok(totals)
    })?;
    let scale = 1.0 / world as f64;
    let mut update = run.outputs.into_iter().next().unwrap_or_default();
    for (_, d) in &mut update {
        d.values_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok(SimRun {
        world,
        strategy,
        tokens_per_rank,
        stats: run.stats,
        update,
    })
}

/// One line of a report; the CSV columns are the first nine fields.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub world: usize,
    pub strategy: String,
    pub tokens_total: u64,
    pub virtual_seconds: f64,
    pub throughput: f64,
    pub speedup: f64,
    pub efficiency: f64,
    pub gather_bytes: u64,
    pub reduce_bytes: u64,
    pub tokens_per_rank: usize,
    pub time_to_solution_virtual: f64,
    pub below_floor: bool,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    world: usize,
    strategy: &'a str,
    tokens_total: u64,
    virtual_seconds: f64,
    throughput: f64,
    speedup: f64,
    efficiency: f64,
    gather_bytes: u64,
    reduce_bytes: u64,
}

impl ReportRow {
    fn from_run(run: &SimRun, steps: usize, floor: usize) -> Self {
        let virtual_seconds = run.virtual_us() / 1e6;
        let tokens_total = run.tokens_total(steps);
        Self {
            world: run.world,
            strategy: run.strategy.name().to_owned(),
            tokens_total,
            virtual_seconds,
            throughput: tokens_total as f64 / virtual_seconds,
            speedup: 1.0,
            efficiency: 1.0,
            gather_bytes: run.bytes_for(CollectiveKind::AllgatherV),
            reduce_bytes: run.bytes_for(CollectiveKind::AllreduceRing),
            tokens_per_rank: run.tokens_per_rank,
            time_to_solution_virtual: virtual_seconds,
            below_floor: run.tokens_per_rank < floor,
        }
    }
}

fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(CsvRow {
            world: r.world,
            strategy: &r.strategy,
            tokens_total: r.tokens_total,
            virtual_seconds: r.virtual_seconds,
            throughput: r.throughput,
            speedup: r.speedup,
            efficiency: r.efficiency,
            gather_bytes: r.gather_bytes,
            reduce_bytes: r.reduce_bytes,
        })
        .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

/// Closed-form byte predictions for the tied variable of a compare run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictedBytes {
    pub variable: String,
    pub gather_bytes: u64,
    pub reduce_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub software_version: String,
    pub mode: String,
    pub config: BTreeMap<String, String>,
    pub world: usize,
    pub gather_strategy: String,
    pub reduce_strategy: String,
    pub memory: MemoryReport,
    pub predicted: Option<PredictedBytes>,
    /// Largest elementwise difference between the two runs' updates.
    pub max_update_diff: f64,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub software_version: String,
    pub mode: String,
    pub config: BTreeMap<String, String>,
    pub base_world: usize,
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Report {
    Compare(CompareReport),
    Scaling(ScalingReport),
}

impl Report {
    pub fn rows(&self) -> &[ReportRow] {
        match self {
            Report::Compare(r) => &r.rows,
            Report::Scaling(r) => &r.rows,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        rows_to_csv(self.rows())
    }
}

/// A trace destined for `<trace_out>/<file_name>`.
#[derive(Debug, Clone)]
pub struct NamedTrace {
    pub file_name: String,
    pub events: Vec<TraceEvent>,
}

impl NamedTrace {
    pub fn to_json(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        emit_trace(&self.events, &mut buf).expect("in-memory trace write");
        buf
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: Report,
    pub traces: Vec<NamedTrace>,
}

impl ExperimentOutput {
    /// The report text in the configured format.
    pub fn rendered_report(&self, csv: bool) -> String {
        if csv {
            self.report.to_csv()
        } else {
            self.report.to_json()
        }
    }

    /// Writes the report to `report_out` (or returns it for stdout) and
    /// traces under `trace_out`.
    pub fn write(&self, cfg: &ExperimentConfig) -> Result<Option<String>, HarnessError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| HarnessError::Io { path, source }
        };
        if let Some(dir) = &cfg.trace_out {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            for t in &self.traces {
                let path = dir.join(&t.file_name);
                fs::write(&path, t.to_json()).map_err(io_err(&path))?;
            }
        }
        let text = self.rendered_report(cfg.csv);
        match &cfg.report_out {
            Some(path) => {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(parent).map_err(io_err(parent))?;
                }
                fs::write(path, text).map_err(io_err(path))?;
                Ok(None)
            }
            None => Ok(Some(text)),
        }
    }
}

fn strategies(choice: StrategyChoice) -> Vec<Strategy> {
    match choice {
        StrategyChoice::Both => vec![Strategy::LegacyGather, Strategy::SparseAsDense],
        StrategyChoice::One(s) => vec![s],
    }
}

fn max_abs_diff(a: &[(VarId, DenseGrad)], b: &[(VarId, DenseGrad)]) -> f64 {
    let mut worst = 0.0f64;
    for (id, x) in a {
        if let Some((_, y)) = b.iter().find(|(j, _)| j == id) {
            for (p, q) in x.values().iter().zip(y.values()) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    worst
}

/// Per-rank stored rows of the tied variable after the legacy local rule:
/// the lookup rows plus the projection gradient as full coverage.
fn legacy_tied_rows(spec: &WorkloadSpec, world: usize) -> Vec<u64> {
    vec![(spec.tokens_per_rank + spec.vocab) as u64; world]
}

/// Same seeded workload under the legacy gather path and a reduce path.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    if cfg.mode != Mode::Compare {
        return Err(ConfigError::field("mode", "run_compare needs mode = compare").into());
    }
    let world = cfg.world_sizes[0];
    let other = match cfg.strategy {
        StrategyChoice::One(Strategy::Proposed) => Strategy::Proposed,
        _ => Strategy::SparseAsDense,
    };
    let tokens = cfg.workload.tokens_per_rank;
    let gather = simulate(cfg, world, Strategy::LegacyGather, tokens, 0)?;
    let reduce = simulate(cfg, world, other, tokens, 1)?;
    let memory = build_memory_report(&gather.stats, &reduce.stats)?;
    let spec = &cfg.workload;
    let predicted = if spec.tied {
        let per_step = predict_gather_bytes(
            world,
            &legacy_tied_rows(spec, world),
            spec.hidden as u64,
            spec.dtype_width as u64,
        )?;
        Some(PredictedBytes {
            variable: TIED_VAR.to_owned(),
            gather_bytes: per_step * cfg.steps as u64,
            reduce_bytes: predict_reduce_bytes(&[spec.vocab, spec.hidden], spec.dtype_width as u64)
                * cfg.steps as u64,
        })
    } else {
        None
    };
    let rows = [&gather, &reduce]
        .iter()
        .map(|r| ReportRow::from_run(r, cfg.steps, cfg.min_tokens_per_rank))
        .collect();
    let report = CompareReport {
        software_version: SOFTWARE_VERSION.to_owned(),
        mode: Mode::Compare.name().to_owned(),
        config: cfg.echo(),
        world,
        gather_strategy: Strategy::LegacyGather.name().to_owned(),
        reduce_strategy: other.name().to_owned(),
        max_update_diff: max_abs_diff(&gather.update, &reduce.update),
        memory,
        predicted,
        rows,
    };
    let traces = [&gather, &reduce]
        .iter()
        .map(|r| NamedTrace {
            file_name: format!("compare-w{world}-{}.json", r.strategy.name()),
            events: r.trace(),
        })
        .collect();
    Ok(ExperimentOutput {
        report: Report::Compare(report),
        traces,
    })
}

fn per_rank_tokens(cfg: &ExperimentConfig, world: usize) -> Result<usize, HarnessError> {
    if cfg.mode != Mode::StrongScaling {
        return Ok(cfg.workload.tokens_per_rank);
    }
    let g = cfg
        .global_tokens
        .ok_or_else(|| ConfigError::field("global_tokens", "required for strong scaling"))?;
    let t = match cfg.remainder_policy {
        RemainderPolicy::Error | RemainderPolicy::Drop => g / world,
        RemainderPolicy::Pad => g.div_ceil(world),
    };
    if t == 0 {
        return Err(ConfigError::field(
            "global_tokens",
            format!("{g} tokens leave nothing for each of {world} ranks"),
        )
        .into());
    }
    Ok(t)
}

fn run_sweep(cfg: &ExperimentConfig, mode: Mode) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    if cfg.mode != mode {
        return Err(
            ConfigError::field("mode", format!("this run needs mode = {}", mode.name())).into(),
        );
    }
    let base = cfg.world_sizes[0];
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut warnings = Vec::new();
    for (pid, strategy) in strategies(cfg.strategy).into_iter().enumerate() {
        let mut strat_rows = Vec::new();
        for &world in &cfg.world_sizes {
            let tokens = per_rank_tokens(cfg, world)?;
            let run = simulate(cfg, world, strategy, tokens, pid as u32)?;
            traces.push(NamedTrace {
                file_name: format!("{}-w{world}-{}.json", mode.name(), strategy.name()),
                events: run.trace(),
            });
            strat_rows.push(ReportRow::from_run(
                &run,
                cfg.steps,
                cfg.min_tokens_per_rank,
            ));
        }
        let throughputs: BTreeMap<usize, f64> =
            strat_rows.iter().map(|r| (r.world, r.throughput)).collect();
        for (row, eff) in strat_rows
            .iter_mut()
            .zip(compute_efficiency(&throughputs, base)?)
        {
            row.speedup = eff.speedup;
            row.efficiency = eff.efficiency;
            if mode == Mode::StrongScaling && row.below_floor {
                warnings.push(format!(
                    "{} world {}: {} tokens per rank is below the floor of {}",
                    row.strategy, row.world, row.tokens_per_rank, cfg.min_tokens_per_rank
                ));
            }
            if !(row.efficiency > 0.0 && row.efficiency <= MAX_EFFICIENCY) {
                warnings.push(format!(
                    "{} world {}: efficiency {} outside (0, {MAX_EFFICIENCY}]",
                    row.strategy, row.world, row.efficiency
                ));
            }
        }
        rows.extend(strat_rows);
    }
    Ok(ExperimentOutput {
        report: Report::Scaling(ScalingReport {
            software_version: SOFTWARE_VERSION.to_owned(),
            mode: mode.name().to_owned(),
            config: cfg.echo(),
            base_world: base,
            rows,
            warnings,
        }),
        traces,
    })
}

/// Fixed per-rank batch, growing world.
pub fn run_weak_scaling(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    run_sweep(cfg, Mode::WeakScaling)
}

/// Fixed global batch split across a growing world.
pub fn run_strong_scaling(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    run_sweep(cfg, Mode::StrongScaling)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    match cfg.mode {
        Mode::Compare => run_compare(cfg),
        Mode::WeakScaling => run_weak_scaling(cfg),
        Mode::StrongScaling => run_strong_scaling(cfg),
    }
}
