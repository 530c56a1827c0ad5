//! Ring schedules expressed as per-step send/receive functions so the
//! threaded and lockstep drivers execute exactly the same arithmetic.

use std::ops::Range;
use std::sync::Arc;

use super::CollectiveError;
use crate::tensor::{DenseGrad, SliceGrad};

/// Negotiation message: what a rank is about to contribute, plus its clock.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Header {
    pub clock_us: f64,
    pub body: HeaderBody,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum HeaderBody {
    Dense {
        shape: Vec<usize>,
        dtype_width: usize,
    },
    Slices {
        dense_shape: Vec<usize>,
        dtype_width: usize,
        rows: usize,
    },
    Broadcast {
        shape: Vec<usize>,
        dtype_width: usize,
        root: usize,
    },
    Schema(Vec<super::VarSchema>),
}

pub(crate) enum Packet {
    Empty,
    Floats(Vec<f64>),
    Slices(SliceGrad),
    Dense(Arc<DenseGrad>),
    Header(Arc<Header>),
}

fn protocol_error() -> CollectiveError {
    CollectiveError::Abort("protocol error: unexpected packet".into())
}

/// A ring collective cut into lockstep rounds. In every round each rank
/// sends one packet to its successor and receives one from its predecessor.
pub(crate) trait RingStep {
    fn rounds(&self) -> usize;
    fn outgoing(&mut self, round: usize) -> Packet;
    fn incoming(&mut self, round: usize, packet: Packet) -> Result<(), CollectiveError>;
}

fn rmod(a: isize, n: usize) -> usize {
    a.rem_euclid(n as isize) as usize
}

/// Items that can ride a ring allgather.
pub(crate) trait Carried: Clone {
    fn into_packet(self) -> Packet;
    fn from_packet(p: Packet) -> Result<Self, CollectiveError>;
    fn wire_bytes(&self) -> u64;
}

impl Carried for Arc<Header> {
    fn into_packet(self) -> Packet {
        Packet::Header(self)
    }
    fn from_packet(p: Packet) -> Result<Self, CollectiveError> {
        match p {
            Packet::Header(h) => Ok(h),
            _ => Err(protocol_error()),
        }
    }
    fn wire_bytes(&self) -> u64 {
        0
    }
}

impl Carried for SliceGrad {
    fn into_packet(self) -> Packet {
        Packet::Slices(self)
    }
    fn from_packet(p: Packet) -> Result<Self, CollectiveError> {
        match p {
            Packet::Slices(s) => Ok(s),
            _ => Err(protocol_error()),
        }
    }
    fn wire_bytes(&self) -> u64 {
        self.buffer_byte_size()
    }
}

/// Ring allgather: in round `r`, rank `k` forwards the item that originated
/// at rank `k - r`. After `N - 1` rounds every rank holds all items.
pub(crate) struct RingAllgather<T> {
    rank: usize,
    world: usize,
    items: Vec<Option<T>>,
    pub sent_bytes: u64,
}

impl<T: Carried> RingAllgather<T> {
    pub fn new(rank: usize, world: usize, own: T) -> Self {
        let mut items: Vec<Option<T>> = (0..world).map(|_| None).collect();
        items[rank] = Some(own);
        Self {
            rank,
            world,
            items,
            sent_bytes: 0,
        }
    }

    pub fn finish(self) -> Result<Vec<T>, CollectiveError> {
        self.items
            .into_iter()
            .map(|i| i.ok_or_else(protocol_error))
            .collect()
    }
}

impl<T: Carried> RingStep for RingAllgather<T> {
    fn rounds(&self) -> usize {
        self.world - 1
    }

    fn outgoing(&mut self, round: usize) -> Packet {
        let src = rmod(self.rank as isize - round as isize, self.world);
        match &self.items[src] {
            Some(item) => {
                self.sent_bytes += item.wire_bytes();
                item.clone().into_packet()
            }
            None => Packet::Empty,
        }
    }

    fn incoming(&mut self, round: usize, packet: Packet) -> Result<(), CollectiveError> {
        let src = rmod(self.rank as isize - 1 - round as isize, self.world);
        self.items[src] = Some(T::from_packet(packet)?);
        Ok(())
    }
}

/// Balanced contiguous split of `len` elements into `parts` chunks.
pub(crate) fn chunk_bounds(len: usize, parts: usize) -> Vec<Range<usize>> {
    (0..parts)
        .map(|c| (c * len / parts)..((c + 1) * len / parts))
        .collect()
}

/// Reduce-scatter followed by allgather over `N` chunks, `2(N - 1)` rounds.
///
/// Chunk `c` starts at rank `c` and travels forward; each receiver adds its
/// own values to the incoming partial sum, so chunk `c` is folded in ring
/// order `c, c+1, ..., c-1`. After reduce-scatter rank `k` owns the finished
/// chunk `k + 1`, and the allgather rounds copy finished chunks verbatim,
/// leaving every rank with bitwise-identical results.
pub(crate) struct RingAllreduce {
    rank: usize,
    world: usize,
    buf: Vec<f64>,
    bounds: Vec<Range<usize>>,
    pub sent_elems: u64,
}

impl RingAllreduce {
    pub fn new(rank: usize, world: usize, values: Vec<f64>) -> Self {
        let bounds = chunk_bounds(values.len(), world);
        Self {
            rank,
            world,
            buf: values,
            bounds,
            sent_elems: 0,
        }
    }

    pub fn finish(self) -> Vec<f64> {
        self.buf
    }

    fn chunk_to_send(&self, round: usize) -> usize {
        let n = self.world;
        if round < n - 1 {
            rmod(self.rank as isize - round as isize, n)
        } else {
            let t = round - (n - 1);
            rmod(self.rank as isize + 1 - t as isize, n)
        }
    }
}

impl RingStep for RingAllreduce {
    fn rounds(&self) -> usize {
        2 * (self.world - 1)
    }

    fn outgoing(&mut self, round: usize) -> Packet {
        let c = self.chunk_to_send(round);
        let chunk = self.buf[self.bounds[c].clone()].to_vec();
        self.sent_elems += chunk.len() as u64;
        Packet::Floats(chunk)
    }

    fn incoming(&mut self, round: usize, packet: Packet) -> Result<(), CollectiveError> {
        let Packet::Floats(data) = packet else {
            return Err(protocol_error());
        };
        let n = self.world;
        let (c, reduce) = if round < n - 1 {
            (rmod(self.rank as isize - 1 - round as isize, n), true)
        } else {
            let t = round - (n - 1);
            (rmod(self.rank as isize - t as isize, n), false)
        };
        let dst = &mut self.buf[self.bounds[c].clone()];
        if data.len() != dst.len() {
            return Err(protocol_error());
        }
        if reduce {
            for (d, partial) in dst.iter_mut().zip(&data) {
                *d += partial;
            }
        } else {
            dst.copy_from_slice(&data);
        }
        Ok(())
    }
}

/// Pipeline broadcast along the ring: in round `r` rank `root + r` forwards
/// the tensor to its successor; other ranks send nothing.
pub(crate) struct RingBroadcast {
    rank: usize,
    world: usize,
    root: usize,
    value: Option<Arc<DenseGrad>>,
    pub sent_bytes: u64,
}

impl RingBroadcast {
    pub fn new(rank: usize, world: usize, root: usize, own: DenseGrad) -> Self {
        Self {
            rank,
            world,
            root,
            value: (rank == root).then(|| Arc::new(own)),
            sent_bytes: 0,
        }
    }

    pub fn finish(self) -> Result<DenseGrad, CollectiveError> {
        let v = self.value.ok_or_else(protocol_error)?;
        Ok(Arc::try_unwrap(v).unwrap_or_else(|shared| (*shared).clone()))
    }
}

impl RingStep for RingBroadcast {
    fn rounds(&self) -> usize {
        self.world - 1
    }

    fn outgoing(&mut self, round: usize) -> Packet {
        if (self.root + round) % self.world == self.rank {
            if let Some(v) = &self.value {
                self.sent_bytes += v.nominal_byte_size();
                return Packet::Dense(Arc::clone(v));
            }
        }
        Packet::Empty
    }

    fn incoming(&mut self, round: usize, packet: Packet) -> Result<(), CollectiveError> {
        let receiver = (self.root + round + 1) % self.world;
        match packet {
            Packet::Dense(v) if receiver == self.rank => {
                self.value = Some(v);
                Ok(())
            }
            Packet::Empty if receiver != self.rank => Ok(()),
            _ => Err(protocol_error()),
        }
    }
}
