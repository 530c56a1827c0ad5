//! Simulated data-parallel runtime: ring allreduce, allgatherv of row
//! slices, broadcast, and bundle exchange with tensor fusion.
//!
//! Ranks are either one thread each, talking to ring neighbours over
//! in-memory channels ([`spawn_ranks`], [`ExecMode::Concurrent`]), or all
//! hosted by one context that steps the same ring schedule in lockstep
//! ([`SerialWorld`], [`ExecMode::Serialized`]). Both routes run identical
//! per-step arithmetic, so their results and accounting are bitwise equal.

mod exchange;
mod group;
mod ops;
mod ring;

pub use exchange::{exchange_bundle, plan_exchange, PlannedOp, Route, VarSchema};
pub use group::{run_world, spawn_ranks, ExecMode, Group, RankCtx, SerialWorld, WorldRun};
pub use ops::{allgather_slices, allreduce_ring, broadcast};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::TraceEvent;
use crate::tensor::{AccumulationRule, TensorError, VarId};

/// Environment variable holding the fusion threshold in bytes.
pub const FUSION_THRESHOLD_ENV: &str = "GRADSYNC_FUSION_THRESHOLD";

/// 128 MiB.
pub const DEFAULT_FUSION_THRESHOLD: u64 = 134_217_728;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CollectiveError {
    /// Every participating rank observes the same abort.
    #[error("collective aborted: {0}")]
    Abort(String),
    #[error("rank {rank}: peer endpoint closed")]
    PeerLost { rank: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CollectiveKind {
    AllreduceRing,
    AllgatherV,
    Broadcast,
}

impl CollectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::AllreduceRing => "allreduce",
            CollectiveKind::AllgatherV => "allgather",
            CollectiveKind::Broadcast => "broadcast",
        }
    }
}

/// How a bundle's gradients travel between ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Any slice gradient sends the variable through allgather.
    LegacyGather,
    /// Every slice is densified before exchange; everything is allreduced.
    SparseAsDense,
    /// Allreduce whenever any rank holds a dense gradient for the variable.
    Proposed,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::LegacyGather,
        Strategy::SparseAsDense,
        Strategy::Proposed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::LegacyGather => "legacy",
            Strategy::SparseAsDense => "dense",
            Strategy::Proposed => "proposed",
        }
    }

    /// Local accumulation each rank applies before exchange. Sparse-as-dense
    /// leaves the framework's accumulation alone and densifies afterwards.
    pub fn local_rule(self) -> AccumulationRule {
        match self {
            Strategy::LegacyGather | Strategy::SparseAsDense => AccumulationRule::Legacy,
            Strategy::Proposed => AccumulationRule::Proposed,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "legacy" => Ok(Strategy::LegacyGather),
            "dense" => Ok(Strategy::SparseAsDense),
            "proposed" => Ok(Strategy::Proposed),
            other => Err(format!(
                "unknown strategy `{other}` (expected legacy, dense or proposed)"
            )),
        }
    }
}

/// Byte threshold for packing dense gradients into shared allreduce
/// buffers. Zero disables fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub threshold_bytes: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            threshold_bytes: DEFAULT_FUSION_THRESHOLD,
        }
    }
}

impl FusionConfig {
    pub fn disabled() -> Self {
        Self { threshold_bytes: 0 }
    }
}

/// Accounting for one collective as seen by one rank.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollectiveRecord {
    pub kind: CollectiveKind,
    pub label: String,
    pub strategy: Option<Strategy>,
    /// Variables carried and the bytes attributed to each.
    pub vars: Vec<(VarId, u64)>,
    /// Allreduce/broadcast: tensor payload. Allgather: full receive buffer
    /// (rows plus indices from every rank).
    pub buffer_bytes: u64,
    /// Modeled per-rank bytes on the wire. Allreduce: `2(N-1)/N` of the
    /// payload. Allgather: bytes received from peers. Broadcast: payload
    /// for non-root ranks.
    pub wire_bytes: f64,
    /// Bytes this rank actually pushed into its channel.
    pub sent_bytes: u64,
    /// Size-negotiation overhead (allgather row counts, 8 bytes per rank).
    pub negotiation_bytes: u64,
    pub start_us: f64,
    pub duration_us: f64,
}

/// Everything one rank recorded during a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollectiveStats {
    pub rank: usize,
    pub world_size: usize,
    pub records: Vec<CollectiveRecord>,
    pub events: Vec<TraceEvent>,
    pub clock_us: f64,
}

impl CollectiveStats {
    pub(crate) fn new(rank: usize, world_size: usize) -> Self {
        Self {
            rank,
            world_size,
            records: Vec::new(),
            events: Vec::new(),
            clock_us: 0.0,
        }
    }

    pub fn bytes_for(&self, kind: CollectiveKind) -> u64 {
        self.records
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.buffer_bytes)
            .sum()
    }

    pub fn collective_time_us(&self) -> f64 {
        self.records.iter().map(|r| r.duration_us).sum()
    }
}
