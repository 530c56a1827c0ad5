use super::group::{Group, RankCtx};
use super::ring::{HeaderBody, RingAllgather, RingAllreduce, RingBroadcast};
use super::{CollectiveError, CollectiveKind, CollectiveRecord, Strategy};
use crate::tensor::{concat_slices, DenseGrad, SliceGrad, VarId};

/// Names a collective in records and trace events.
#[derive(Debug, Clone)]
pub(crate) struct Tag {
    pub label: String,
    pub strategy: Option<Strategy>,
    /// Variables carried, with their byte share. Empty means "the whole
    /// payload is one anonymous tensor".
    pub vars: Vec<(VarId, u64)>,
}

impl Tag {
    fn anonymous() -> Self {
        Self {
            label: "tensor".into(),
            strategy: None,
            vars: Vec::new(),
        }
    }

    fn vars_or(&self, bytes: u64) -> Vec<(VarId, u64)> {
        if self.vars.is_empty() {
            vec![(VarId::new(self.label.clone()), bytes)]
        } else {
            self.vars.clone()
        }
    }
}

fn check_inputs(group: &Group, n: usize) {
    assert_eq!(n, group.ranks().len(), "one input per hosted rank");
}

impl Group {
    /// Elementwise sum over all ranks via ring allreduce.
    pub fn allreduce(&mut self, inputs: Vec<DenseGrad>) -> Result<Vec<DenseGrad>, CollectiveError> {
        self.allreduce_tagged(inputs, Tag::anonymous())
    }

    pub(crate) fn allreduce_tagged(
        &mut self,
        inputs: Vec<DenseGrad>,
        tag: Tag,
    ) -> Result<Vec<DenseGrad>, CollectiveError> {
        check_inputs(self, inputs.len());
        let bodies = inputs
            .iter()
            .map(|d| HeaderBody::Dense {
                shape: d.shape().to_vec(),
                dtype_width: d.dtype_width(),
            })
            .collect();
        let (all, start) = self.negotiate(bodies)?;
        if let Some(bad) = all.iter().find(|b| **b != all[0]) {
            return Err(CollectiveError::Abort(format!(
                "allreduce shape mismatch across ranks: {:?} vs {bad:?}",
                all[0]
            )));
        }
        let HeaderBody::Dense { shape, dtype_width } = all[0].clone() else {
            unreachable!("dense headers were negotiated")
        };
        let world = self.world_size();
        let payload = inputs[0].nominal_byte_size();
        let (outputs, sent): (Vec<DenseGrad>, Vec<u64>) = if world == 1 {
            (inputs, vec![0])
        } else {
            let mut algs: Vec<RingAllreduce> = self
                .ranks()
                .iter()
                .zip(inputs)
                .map(|(&r, d)| RingAllreduce::new(r, world, d.into_values()))
                .collect();
            self.run_ring(&mut algs)?;
            algs.into_iter()
                .map(|a| {
                    let sent = a.sent_elems * dtype_width as u64;
                    let d = DenseGrad::with_dtype_width(shape.clone(), a.finish(), dtype_width)
                        .expect("ring preserves length");
                    (d, sent)
                })
                .unzip()
        };
        let (wire, duration) = if world == 1 {
            (0.0, 0.0)
        } else {
            // Exact integer numerator, one rounding.
            let wire = (2 * (world as u64 - 1) * payload) as f64 / world as f64;
            (wire, self.link_model().duration_us(wire))
        };
        for (local, sent_bytes) in sent.into_iter().enumerate() {
            self.record(
                local,
                CollectiveRecord {
                    kind: CollectiveKind::AllreduceRing,
                    label: tag.label.clone(),
                    strategy: tag.strategy,
                    vars: tag.vars_or(payload),
                    buffer_bytes: payload,
                    wire_bytes: wire,
                    sent_bytes,
                    negotiation_bytes: 0,
                    start_us: start,
                    duration_us: duration,
                },
            );
        }
        Ok(outputs)
    }

    /// Concatenation of every rank's slices in ascending rank order.
    pub fn allgather(&mut self, inputs: Vec<SliceGrad>) -> Result<Vec<SliceGrad>, CollectiveError> {
        self.allgather_tagged(inputs, Tag::anonymous())
    }

    pub(crate) fn allgather_tagged(
        &mut self,
        inputs: Vec<SliceGrad>,
        tag: Tag,
    ) -> Result<Vec<SliceGrad>, CollectiveError> {
        check_inputs(self, inputs.len());
        let bodies = inputs
            .iter()
            .map(|s| HeaderBody::Slices {
                dense_shape: s.dense_shape().to_vec(),
                dtype_width: s.dtype_width(),
                rows: s.num_rows(),
            })
            .collect();
        let (all, start) = self.negotiate(bodies)?;
        let layout = |b: &HeaderBody| match b {
            HeaderBody::Slices {
                dense_shape,
                dtype_width,
                ..
            } => Some((dense_shape.clone(), *dtype_width)),
            _ => None,
        };
        let first = layout(&all[0]);
        if all.iter().any(|b| layout(b) != first) {
            return Err(CollectiveError::Abort(format!(
                "allgather dense_shape mismatch across ranks: {:?}",
                all.iter()
                    .filter_map(layout)
                    .map(|l| l.0)
                    .collect::<Vec<_>>()
            )));
        }
        let world = self.world_size();
        let own_bytes: Vec<u64> = inputs.iter().map(SliceGrad::buffer_byte_size).collect();
        let (outputs, sent): (Vec<SliceGrad>, Vec<u64>) = if world == 1 {
            (inputs, vec![0])
        } else {
            let mut algs: Vec<RingAllgather<SliceGrad>> = self
                .ranks()
                .iter()
                .zip(inputs)
                .map(|(&r, s)| RingAllgather::new(r, world, s))
                .collect();
            self.run_ring(&mut algs)?;
            let mut outs = Vec::with_capacity(algs.len());
            let mut sent = Vec::with_capacity(algs.len());
            for a in algs {
                sent.push(a.sent_bytes);
                outs.push(concat_slices(&a.finish()?)?);
            }
            (outs, sent)
        };
        let buffer = outputs[0].buffer_byte_size();
        let duration = if world == 1 {
            0.0
        } else {
            self.link_model().duration_us(buffer as f64)
        };
        for (local, (sent_bytes, own)) in sent.into_iter().zip(own_bytes).enumerate() {
            let wire = if world == 1 {
                0.0
            } else {
                (buffer - own) as f64
            };
            self.record(
                local,
                CollectiveRecord {
                    kind: CollectiveKind::AllgatherV,
                    label: tag.label.clone(),
                    strategy: tag.strategy,
                    vars: tag.vars_or(buffer),
                    buffer_bytes: buffer,
                    wire_bytes: wire,
                    sent_bytes,
                    negotiation_bytes: world as u64 * 8,
                    start_us: start,
                    duration_us: duration,
                },
            );
        }
        Ok(outputs)
    }

    /// Every rank ends with `root`'s tensor.
    pub fn broadcast(
        &mut self,
        inputs: Vec<DenseGrad>,
        root: usize,
    ) -> Result<Vec<DenseGrad>, CollectiveError> {
        check_inputs(self, inputs.len());
        let bodies = inputs
            .iter()
            .map(|d| HeaderBody::Broadcast {
                shape: d.shape().to_vec(),
                dtype_width: d.dtype_width(),
                root,
            })
            .collect();
        let (all, start) = self.negotiate(bodies)?;
        let world = self.world_size();
        if root >= world {
            return Err(CollectiveError::Abort(format!(
                "invalid broadcast root {root} for world size {world}"
            )));
        }
        if all.iter().any(|b| *b != all[0]) {
            return Err(CollectiveError::Abort(
                "broadcast root or shape mismatch across ranks".into(),
            ));
        }
        let payload = inputs[0].nominal_byte_size();
        let (outputs, sent): (Vec<DenseGrad>, Vec<u64>) = if world == 1 {
            (inputs, vec![0])
        } else {
            let mut algs: Vec<RingBroadcast> = self
                .ranks()
                .iter()
                .zip(inputs)
                .map(|(&r, d)| RingBroadcast::new(r, world, root, d))
                .collect();
            self.run_ring(&mut algs)?;
            let mut outs = Vec::with_capacity(algs.len());
            let mut sent = Vec::with_capacity(algs.len());
            for a in algs {
                sent.push(a.sent_bytes);
                outs.push(a.finish()?);
            }
            (outs, sent)
        };
        let duration = if world == 1 {
            0.0
        } else {
            self.link_model().duration_us(payload as f64)
        };
        let ranks = self.ranks().to_vec();
        for (local, sent_bytes) in sent.into_iter().enumerate() {
            let wire = if world == 1 || ranks[local] == root {
                0.0
            } else {
                payload as f64
            };
            self.record(
                local,
                CollectiveRecord {
                    kind: CollectiveKind::Broadcast,
                    label: "tensor".into(),
                    strategy: None,
                    vars: vec![(VarId::new("tensor"), payload)],
                    buffer_bytes: payload,
                    wire_bytes: wire,
                    sent_bytes,
                    negotiation_bytes: 0,
                    start_us: start,
                    duration_us: duration,
                },
            );
        }
        Ok(outputs)
    }
}

fn single<T>(mut v: Vec<T>) -> T {
    v.pop().expect("one output per hosted rank")
}

/// Ring allreduce from one rank's point of view.
pub fn allreduce_ring(ctx: &mut RankCtx, g: &DenseGrad) -> Result<DenseGrad, CollectiveError> {
    ctx.group().allreduce(vec![g.clone()]).map(single)
}

/// Allgatherv of row slices from one rank's point of view.
pub fn allgather_slices(ctx: &mut RankCtx, s: &SliceGrad) -> Result<SliceGrad, CollectiveError> {
    ctx.group().allgather(vec![s.clone()]).map(single)
}

pub fn broadcast(
    ctx: &mut RankCtx,
    g: &DenseGrad,
    root: usize,
) -> Result<DenseGrad, CollectiveError> {
    ctx.group().broadcast(vec![g.clone()], root).map(single)
}
