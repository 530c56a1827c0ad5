use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};

use super::ring::{Header, HeaderBody, Packet, RingAllgather, RingStep};
use super::{CollectiveError, CollectiveRecord, CollectiveStats};
use crate::costmodel::{LinkModel, Phase, TraceEvent};

enum Link {
    /// Thread-per-rank: channel to the successor, channel from the predecessor.
    Ring {
        next: Sender<Packet>,
        prev: Receiver<Packet>,
    },
    /// Every rank of the world is hosted here and stepped in lockstep.
    Lockstep,
}

/// The ranks hosted by one execution context: a single rank when running
/// thread-per-rank, the whole world when serialized.
///
/// Collective methods take one input per hosted rank (in ascending rank
/// order) and return one output per hosted rank.
pub struct Group {
    world_size: usize,
    ranks: Vec<usize>,
    link: Link,
    link_model: LinkModel,
    pid: u32,
    stats: Vec<CollectiveStats>,
}

impl Group {
    fn new(
        world_size: usize,
        ranks: Vec<usize>,
        link: Link,
        link_model: LinkModel,
        pid: u32,
    ) -> Self {
        let stats = ranks
            .iter()
            .map(|&r| CollectiveStats::new(r, world_size))
            .collect();
        Self {
            world_size,
            ranks,
            link,
            link_model,
            pid,
            stats,
        }
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn link_model(&self) -> LinkModel {
        self.link_model
    }

    pub fn stats(&self) -> &[CollectiveStats] {
        &self.stats
    }

    pub fn into_stats(self) -> Vec<CollectiveStats> {
        self.stats
    }

    pub fn clock_us(&self, local: usize) -> f64 {
        self.stats[local].clock_us
    }

    /// Advances a hosted rank's virtual clock by modeled local work and
    /// records it as a complete event.
    pub fn compute(&mut self, local: usize, name: &str, duration_us: f64) {
        let pid = self.pid;
        let s = &mut self.stats[local];
        s.events.push(TraceEvent::complete(
            name,
            s.clock_us,
            duration_us,
            pid,
            s.rank as u32,
        ));
        s.clock_us += duration_us;
    }

    pub fn begin_span(&mut self, local: usize, name: &str) {
        let pid = self.pid;
        let s = &mut self.stats[local];
        s.events.push(TraceEvent::instant(
            Phase::Begin,
            name,
            s.clock_us,
            pid,
            s.rank as u32,
        ));
    }

    pub fn end_span(&mut self, local: usize, name: &str) {
        let pid = self.pid;
        let s = &mut self.stats[local];
        s.events.push(TraceEvent::instant(
            Phase::End,
            name,
            s.clock_us,
            pid,
            s.rank as u32,
        ));
    }

    /// Runs one ring schedule. `algs` holds one state machine per hosted rank.
    pub(crate) fn run_ring<A: RingStep>(&mut self, algs: &mut [A]) -> Result<(), CollectiveError> {
        debug_assert_eq!(algs.len(), self.ranks.len());
        let Some(rounds) = algs.first().map(RingStep::rounds) else {
            return Ok(());
        };
        match &self.link {
            Link::Ring { next, prev } => {
                let rank = self.ranks[0];
                let alg = &mut algs[0];
                for round in 0..rounds {
                    next.send(alg.outgoing(round))
                        .map_err(|_| CollectiveError::PeerLost { rank })?;
                    let p = prev
                        .recv()
                        .map_err(|_| CollectiveError::PeerLost { rank })?;
                    alg.incoming(round, p)?;
                }
            }
            Link::Lockstep => {
                let n = algs.len();
                for round in 0..rounds {
                    let mut outs: Vec<Option<Packet>> =
                        algs.iter_mut().map(|a| Some(a.outgoing(round))).collect();
                    for (k, alg) in algs.iter_mut().enumerate() {
                        let from = (k + n - 1) % n;
                        let p = outs[from].take().expect("each packet is received once");
                        alg.incoming(round, p)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Exchanges headers so every rank sees every contribution's
    /// description. Returns all bodies in rank order and the collective
    /// start time (the latest arrival clock).
    pub(crate) fn negotiate(
        &mut self,
        bodies: Vec<HeaderBody>,
    ) -> Result<(Vec<HeaderBody>, f64), CollectiveError> {
        let mut algs: Vec<RingAllgather<Arc<Header>>> = self
            .ranks
            .iter()
            .zip(bodies)
            .zip(&self.stats)
            .map(|((&rank, body), s)| {
                let h = Arc::new(Header {
                    clock_us: s.clock_us,
                    body,
                });
                RingAllgather::new(rank, self.world_size, h)
            })
            .collect();
        self.run_ring(&mut algs)?;
        let all = algs
            .into_iter()
            .next()
            .expect("at least one hosted rank")
            .finish()?;
        let start = all.iter().map(|h| h.clock_us).fold(0.0, f64::max);
        Ok((all.iter().map(|h| h.body.clone()).collect(), start))
    }

    /// Appends a record for hosted rank `local`, sets its clock to the end
    /// of the collective and emits the matching trace event.
    pub(crate) fn record(&mut self, local: usize, rec: CollectiveRecord) {
        let pid = self.pid;
        let s = &mut self.stats[local];
        let mut ev = TraceEvent::complete(
            format!("{}.{}", rec.kind.name(), rec.label),
            rec.start_us,
            rec.duration_us,
            pid,
            s.rank as u32,
        )
        .with_arg("bytes", rec.buffer_bytes)
        .with_arg("wire_bytes", rec.wire_bytes)
        .with_arg(
            "vars",
            rec.vars
                .iter()
                .map(|(v, _)| v.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        if let Some(strategy) = rec.strategy {
            ev = ev.with_arg("strategy", strategy);
        }
        s.events.push(ev);
        s.clock_us = rec.start_us + rec.duration_us;
        s.records.push(rec);
    }
}

/// One rank's handle when running thread-per-rank.
pub struct RankCtx {
    group: Group,
}

impl RankCtx {
    pub fn rank(&self) -> usize {
        self.group.ranks[0]
    }

    pub fn world_size(&self) -> usize {
        self.group.world_size
    }

    pub fn stats(&self) -> &CollectiveStats {
        &self.group.stats[0]
    }

    pub fn group(&mut self) -> &mut Group {
        &mut self.group
    }

    pub fn into_stats(self) -> CollectiveStats {
        self.group
            .stats
            .into_iter()
            .next()
            .expect("one hosted rank")
    }
}

fn build_ring(world: usize, link_model: LinkModel, pid: u32) -> Vec<RankCtx> {
    assert!(world >= 1, "world size must be at least 1");
    if world == 1 {
        return vec![RankCtx {
            group: Group::new(1, vec![0], Link::Lockstep, link_model, pid),
        }];
    }
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..world).map(|_| channel()).unzip();
    let mut receivers: Vec<Option<Receiver<Packet>>> = receivers.into_iter().map(Some).collect();
    senders
        .into_iter()
        .enumerate()
        .map(|(rank, next)| {
            // Channel `k` carries traffic from rank k to rank k + 1.
            let prev = receivers[(rank + world - 1) % world]
                .take()
                .expect("each receiver has one owner");
            RankCtx {
                group: Group::new(
                    world,
                    vec![rank],
                    Link::Ring { next, prev },
                    link_model,
                    pid,
                ),
            }
        })
        .collect()
}

/// Runs `f` once per rank, each on its own thread. Returns every rank's
/// output and stats in rank order. A rank that returns early closes its
/// endpoints, which aborts any collective its peers are still inside.
pub fn spawn_ranks<T, F>(world: usize, link_model: LinkModel, f: F) -> Vec<(T, CollectiveStats)>
where
    T: Send,
    F: Fn(&mut RankCtx) -> T + Sync,
{
    let ctxs = build_ring(world, link_model, 0);
    let f = &f;
    thread::scope(|scope| {
        let handles: Vec<_> = ctxs
            .into_iter()
            .map(|mut ctx| {
                scope.spawn(move || {
                    let out = f(&mut ctx);
                    (out, ctx.into_stats())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    })
}

/// Hosts the whole world in the calling context.
pub struct SerialWorld {
    group: Group,
}

impl SerialWorld {
    pub fn new(world: usize, link_model: LinkModel) -> Self {
        assert!(world >= 1, "world size must be at least 1");
        Self {
            group: Group::new(world, (0..world).collect(), Link::Lockstep, link_model, 0),
        }
    }

    pub fn group(&mut self) -> &mut Group {
        &mut self.group
    }

    pub fn stats(&self) -> &[CollectiveStats] {
        self.group.stats()
    }

    pub fn into_stats(self) -> Vec<CollectiveStats> {
        self.group.into_stats()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExecMode {
    /// One thread per rank.
    Concurrent,
    /// All ranks stepped by the calling thread.
    Serialized,
}

impl std::str::FromStr for ExecMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concurrent" => Ok(ExecMode::Concurrent),
            "serialized" => Ok(ExecMode::Serialized),
            other => Err(format!(
                "unknown exec mode `{other}` (expected concurrent or serialized)"
            )),
        }
    }
}

impl ExecMode {
    pub fn name(self) -> &'static str {
        match self {
            ExecMode::Concurrent => "concurrent",
            ExecMode::Serialized => "serialized",
        }
    }
}

#[derive(Debug)]
pub struct WorldRun<T> {
    /// One output per rank, in rank order.
    pub outputs: Vec<T>,
    pub stats: Vec<CollectiveStats>,
}

/// Runs an SPMD program over `world` ranks. `f` receives a [`Group`] and
/// must return one output per hosted rank.
///
/// When ranks disagree about why a run failed (the rank that saw bad input
/// aborts, its peers see closed endpoints), the reported error prefers an
/// abort, then the lowest rank.
pub fn run_world<T, F>(
    world: usize,
    mode: ExecMode,
    link_model: LinkModel,
    pid: u32,
    f: F,
) -> Result<WorldRun<T>, CollectiveError>
where
    T: Send,
    F: Fn(&mut Group) -> Result<Vec<T>, CollectiveError> + Sync,
{
    match mode {
        ExecMode::Serialized => {
            let mut group =
                Group::new(world, (0..world).collect(), Link::Lockstep, link_model, pid);
            let outputs = f(&mut group)?;
            assert_eq!(outputs.len(), world, "one output per rank");
            Ok(WorldRun {
                outputs,
                stats: group.into_stats(),
            })
        }
        ExecMode::Concurrent => {
            let ctxs = build_ring(world, link_model, pid);
            let f = &f;
            let results: Vec<(Result<Vec<T>, CollectiveError>, CollectiveStats)> =
                thread::scope(|scope| {
                    let handles: Vec<_> = ctxs
                        .into_iter()
                        .map(|mut ctx| {
                            scope.spawn(move || {
                                let out = f(&mut ctx.group);
                                (out, ctx.into_stats())
                            })
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                        .collect()
                });
            let mut outputs = Vec::with_capacity(world);
            let mut stats = Vec::with_capacity(world);
            let mut errors = Vec::new();
            for (out, s) in results {
                match out {
                    Ok(mut v) => {
                        assert_eq!(v.len(), 1, "one output per hosted rank");
                        outputs.push(v.pop().expect("checked length"));
                    }
                    Err(e) => errors.push(e),
                }
                stats.push(s);
            }
            if !errors.is_empty() {
                let pick = errors
                    .iter()
                    .position(|e| matches!(e, CollectiveError::Abort(_)))
                    .unwrap_or(0);
                return Err(errors.swap_remove(pick));
            }
            Ok(WorldRun { outputs, stats })
        }
    }
}
