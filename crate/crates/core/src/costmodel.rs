//! Buffer-size prediction, modeled collective durations, memory reports and
//! Chrome trace-event output.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collectives::CollectiveStats;
use crate::tensor::{VarId, INDEX_WIDTH};

/// Default per-collective latency, microseconds.
pub const DEFAULT_ALPHA_US: f64 = 10.0;

/// Default link bandwidth, bytes per second (100 Gbit/s).
pub const DEFAULT_BANDWIDTH_BYTES_PER_S: f64 = 12.5e9;

/// Linear latency/bandwidth cost of one collective: `alpha + bytes / beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub alpha_us: f64,
    pub bandwidth_bytes_per_s: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            alpha_us: DEFAULT_ALPHA_US,
            bandwidth_bytes_per_s: DEFAULT_BANDWIDTH_BYTES_PER_S,
        }
    }
}

impl LinkModel {
    pub fn duration_us(&self, bytes: f64) -> f64 {
        self.alpha_us + bytes / self.bandwidth_bytes_per_s * 1e6
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("world size {world} does not match {rows} per-rank row counts")]
    LengthMismatch { world: usize, rows: usize },
    #[error("runs are not comparable: {0}")]
    WorkloadMismatch(String),
}

/// Receive-buffer bytes of an allgather of row slices: row payload plus
/// 8-byte index storage for every row from every rank.
pub fn predict_gather_bytes(
    world: usize,
    per_rank_rows: &[u64],
    row_width: u64,
    dtype_width: u64,
) -> Result<u64, CostError> {
    if world != per_rank_rows.len() {
        return Err(CostError::LengthMismatch {
            world,
            rows: per_rank_rows.len(),
        });
    }
    let rows: u64 = per_rank_rows.iter().sum();
    Ok(rows * row_width * dtype_width + rows * INDEX_WIDTH as u64)
}

/// Buffer bytes of a dense reduction. Has no world-size term.
pub fn predict_reduce_bytes(shape: &[usize], dtype_width: u64) -> u64 {
    shape.iter().map(|&d| d as u64).product::<u64>() * dtype_width
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "B")]
    Begin,
    #[serde(rename = "E")]
    End,
    #[serde(rename = "X")]
    Complete,
}

/// One trace-event record, serialized with Chrome trace-event field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub name: String,
    #[serde(rename = "ph")]
    pub phase: Phase,
    #[serde(rename = "ts")]
    pub timestamp_us: f64,
    #[serde(rename = "dur", default, skip_serializing_if = "Option::is_none")]
    pub duration_us: Option<f64>,
    pub pid: u32,
    pub tid: u32,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
}

impl TraceEvent {
    pub fn complete(name: impl Into<String>, ts: f64, dur: f64, pid: u32, tid: u32) -> Self {
        Self {
            name: name.into(),
            phase: Phase::Complete,
            timestamp_us: ts,
            duration_us: Some(dur),
            pid,
            tid,
            args: BTreeMap::new(),
        }
    }

    pub fn instant(phase: Phase, name: impl Into<String>, ts: f64, pid: u32, tid: u32) -> Self {
        Self {
            name: name.into(),
            phase,
            timestamp_us: ts,
            duration_us: None,
            pid,
            tid,
            args: BTreeMap::new(),
        }
    }

    pub fn with_arg(mut self, key: &str, value: impl ToString) -> Self {
        self.args.insert(key.to_owned(), value.to_string());
        self
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("event {index} ({name}): timestamp goes backwards on pid {pid} tid {tid}")]
    NonMonotonic {
        index: usize,
        name: String,
        pid: u32,
        tid: u32,
    },
    #[error("event {index} ({name}): end without matching begin")]
    UnmatchedEnd { index: usize, name: String },
    #[error("{0} begin event(s) never ended")]
    UnclosedBegin(usize),
    #[error("event {index} ({name}): complete event needs a non-negative duration")]
    BadDuration { index: usize, name: String },
}

/// Checks per-thread timestamp ordering and begin/end balancing.
pub fn check_trace(events: &[TraceEvent]) -> Result<(), TraceError> {
    let mut last: HashMap<(u32, u32), f64> = HashMap::new();
    let mut open: HashMap<(u32, u32, &str), usize> = HashMap::new();
    for (index, e) in events.iter().enumerate() {
        let key = (e.pid, e.tid);
        if let Some(&prev) = last.get(&key) {
            if e.timestamp_us < prev {
                return Err(TraceError::NonMonotonic {
                    index,
                    name: e.name.clone(),
                    pid: e.pid,
                    tid: e.tid,
                });
            }
        }
        last.insert(key, e.timestamp_us);
        match e.phase {
            Phase::Begin => *open.entry((e.pid, e.tid, &e.name)).or_default() += 1,
            Phase::End => match open.get_mut(&(e.pid, e.tid, e.name.as_str())) {
                Some(n) if *n > 0 => *n -= 1,
                _ => {
                    return Err(TraceError::UnmatchedEnd {
                        index,
                        name: e.name.clone(),
                    })
                }
            },
            Phase::Complete => {
                if !matches!(e.duration_us, Some(d) if d >= 0.0) {
                    return Err(TraceError::BadDuration {
                        index,
                        name: e.name.clone(),
                    });
                }
            }
        }
    }
    let unclosed: usize = open.values().sum();
    if unclosed > 0 {
        return Err(TraceError::UnclosedBegin(unclosed));
    }
    Ok(())
}

/// Writes events as a Chrome trace-event JSON array.
pub fn emit_trace<W: Write>(events: &[TraceEvent], mut out: W) -> io::Result<()> {
    out.write_all(b"[")?;
    for (i, e) in events.iter().enumerate() {
        if i > 0 {
            out.write_all(b",")?;
        }
        out.write_all(b"\n")?;
        serde_json::to_writer(&mut out, e)?;
    }
    if !events.is_empty() {
        out.write_all(b"\n")?;
    }
    out.write_all(b"]\n")?;
    out.flush()
}

pub fn parse_trace(bytes: &[u8]) -> serde_json::Result<Vec<TraceEvent>> {
    serde_json::from_slice(bytes)
}

/// Per-variable gather-vs-reduce comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableMemory {
    pub variable: String,
    pub gather_bytes: u64,
    pub reduce_bytes: u64,
    pub byte_ratio: Option<f64>,
    pub gather_duration_us: f64,
    pub reduce_duration_us: f64,
    pub duration_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub world: usize,
    pub variables: Vec<VariableMemory>,
    pub gather_bytes: u64,
    pub reduce_bytes: u64,
    pub byte_ratio: Option<f64>,
    /// Summed modeled duration of every collective in the gather-path run.
    pub gather_accumulate_duration_us: f64,
    /// Same for the reduce-path run.
    pub reduce_accumulate_duration_us: f64,
    pub duration_ratio: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

#[derive(Default)]
struct VarTotals {
    bytes: u64,
    duration_us: f64,
}

fn per_variable(stats: &CollectiveStats) -> (Vec<VarId>, HashMap<VarId, VarTotals>, f64) {
    let mut order = Vec::new();
    let mut totals: HashMap<VarId, VarTotals> = HashMap::new();
    let mut all = 0.0;
    for rec in &stats.records {
        all += rec.duration_us;
        for (var, bytes) in &rec.vars {
            let t = totals.entry(var.clone()).or_insert_with(|| {
                order.push(var.clone());
                VarTotals::default()
            });
            t.bytes += bytes;
            t.duration_us += rec.duration_us;
        }
    }
    (order, totals, all)
}

/// Compares a gather-path run against a reduce-path run of the same
/// workload. Collectives are symmetric, so rank 0's records stand for the
/// world.
pub fn build_memory_report(
    gather_run: &[CollectiveStats],
    reduce_run: &[CollectiveStats],
) -> Result<MemoryReport, CostError> {
    let (g, r) = match (gather_run.first(), reduce_run.first()) {
        (Some(g), Some(r)) => (g, r),
        _ => return Err(CostError::WorkloadMismatch("empty run".into())),
    };
    if g.world_size != r.world_size || gather_run.len() != reduce_run.len() {
        return Err(CostError::WorkloadMismatch(format!(
            "world sizes {} and {}",
            g.world_size, r.world_size
        )));
    }
    let (g_order, g_totals, g_all) = per_variable(g);
    let (r_order, r_totals, r_all) = per_variable(r);
    let mut g_sorted = g_order.clone();
    let mut r_sorted = r_order;
    g_sorted.sort();
    r_sorted.sort();
    if g_sorted != r_sorted {
        return Err(CostError::WorkloadMismatch(
            "runs exchanged different variables".into(),
        ));
    }
    let variables: Vec<VariableMemory> = g_order
        .iter()
        .map(|var| {
            let gt = &g_totals[var];
            let rt = &r_totals[var];
            VariableMemory {
                variable: var.to_string(),
                gather_bytes: gt.bytes,
                reduce_bytes: rt.bytes,
                byte_ratio: ratio(gt.bytes as f64, rt.bytes as f64),
                gather_duration_us: gt.duration_us,
                reduce_duration_us: rt.duration_us,
                duration_ratio: ratio(gt.duration_us, rt.duration_us),
            }
        })
        .collect();
    let gather_bytes = variables.iter().map(|v| v.gather_bytes).sum::<u64>();
    let reduce_bytes = variables.iter().map(|v| v.reduce_bytes).sum::<u64>();
    Ok(MemoryReport {
        world: g.world_size,
        byte_ratio: ratio(gather_bytes as f64, reduce_bytes as f64),
        gather_bytes,
        reduce_bytes,
        variables,
        gather_accumulate_duration_us: g_all,
        reduce_accumulate_duration_us: r_all,
        duration_ratio: ratio(g_all, r_all),
    })
}
