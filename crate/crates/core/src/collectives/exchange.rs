use serde::{Deserialize, Serialize};

use super::group::{Group, RankCtx};
use super::ops::Tag;
use super::ring::HeaderBody;
use super::{CollectiveError, FusionConfig, Strategy};
use crate::tensor::{
    densify_pass, materialize, DenseGrad, Grad, GradBundle, GradKind, SliceGrad, VarId,
};

/// What one rank holds for one variable, as announced before exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarSchema {
    pub id: VarId,
    pub dense_shape: Vec<usize>,
    pub kind: GradKind,
    pub rows: usize,
    pub dtype_width: usize,
}

impl VarSchema {
    pub fn of(id: &VarId, g: &Grad) -> Self {
        Self {
            id: id.clone(),
            dense_shape: g.dense_shape().to_vec(),
            kind: g.kind(),
            rows: g.stored_rows(),
            dtype_width: g.dtype_width(),
        }
    }

    pub fn dense_bytes(&self) -> u64 {
        self.dense_shape.iter().product::<usize>() as u64 * self.dtype_width as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    Reduce,
    Gather,
}

/// One collective of an exchange; indices refer to bundle positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlannedOp {
    Reduce(Vec<usize>),
    Gather(usize),
}

fn route(strategy: Strategy, kinds: impl Iterator<Item = GradKind> + Clone) -> Route {
    let any_slices = kinds.clone().any(|k| k == GradKind::Slices);
    let any_dense = kinds.into_iter().any(|k| k == GradKind::Dense);
    match strategy {
        Strategy::LegacyGather if any_slices => Route::Gather,
        Strategy::LegacyGather | Strategy::SparseAsDense => Route::Reduce,
        Strategy::Proposed if any_dense => Route::Reduce,
        Strategy::Proposed => Route::Gather,
    }
}

/// Decides the collectives for an exchange from every rank's schema.
///
/// Dense-routed variables no larger than the fusion threshold are packed
/// greedily, in bundle order, into shared buffers; a buffer is flushed when
/// the next variable would overflow it or has a different element width.
pub fn plan_exchange(
    schemas: &[Vec<VarSchema>],
    strategy: Strategy,
    fusion: FusionConfig,
) -> Result<Vec<PlannedOp>, CollectiveError> {
    let Some(first) = schemas.first() else {
        return Ok(Vec::new());
    };
    for (rank, s) in schemas.iter().enumerate() {
        let same = s.len() == first.len()
            && s.iter().zip(first).all(|(a, b)| {
                a.id == b.id && a.dense_shape == b.dense_shape && a.dtype_width == b.dtype_width
            });
        if !same {
            return Err(CollectiveError::Abort(format!(
                "bundle schema mismatch between rank 0 and rank {rank}"
            )));
        }
    }
    let threshold = fusion.threshold_bytes;
    let mut ops = Vec::new();
    let mut open: Vec<usize> = Vec::new();
    let mut open_bytes = 0u64;
    for (i, var) in first.iter().enumerate() {
        match route(strategy, schemas.iter().map(|s| s[i].kind)) {
            Route::Gather => ops.push(PlannedOp::Gather(i)),
            Route::Reduce => {
                let bytes = var.dense_bytes();
                if threshold == 0 || bytes > threshold {
                    ops.push(PlannedOp::Reduce(vec![i]));
                    continue;
                }
                let width_changes = open
                    .first()
                    .is_some_and(|&j| first[j].dtype_width != var.dtype_width);
                if !open.is_empty() && (open_bytes + bytes > threshold || width_changes) {
                    ops.push(PlannedOp::Reduce(std::mem::take(&mut open)));
                    open_bytes = 0;
                }
                open.push(i);
                open_bytes += bytes;
            }
        }
    }
    if !open.is_empty() {
        ops.push(PlannedOp::Reduce(open));
    }
    Ok(ops)
}

fn reduce_label(schema: &[VarSchema], vars: &[usize]) -> String {
    match vars {
        [one] => schema[*one].id.to_string(),
        many => format!(
            "fusion({})",
            many.iter()
                .map(|&i| schema[i].id.as_str())
                .collect::<Vec<_>>()
                .join(",")
        ),
    }
}

impl Group {
    /// Exchanges one bundle per hosted rank under `strategy`.
    ///
    /// Every rank must submit the same variables, in the same order, with
    /// the same dense shapes; otherwise every rank aborts.
    pub fn exchange(
        &mut self,
        bundles: Vec<GradBundle>,
        strategy: Strategy,
        fusion: FusionConfig,
    ) -> Result<Vec<GradBundle>, CollectiveError> {
        assert_eq!(
            bundles.len(),
            self.ranks().len(),
            "one bundle per hosted rank"
        );
        let bundles: Vec<GradBundle> = if strategy == Strategy::SparseAsDense {
            bundles.iter().map(|b| densify_pass(b, true)).collect()
        } else {
            bundles
        };
        let bodies = bundles
            .iter()
            .map(|b| HeaderBody::Schema(b.iter().map(|(id, g)| VarSchema::of(id, g)).collect()))
            .collect();
        let (all, _) = self.negotiate(bodies)?;
        let schemas: Vec<Vec<VarSchema>> = all
            .into_iter()
            .map(|b| match b {
                HeaderBody::Schema(s) => s,
                _ => unreachable!("schema headers were negotiated"),
            })
            .collect();
        let plan = plan_exchange(&schemas, strategy, fusion)?;
        let schema = &schemas[0];

        let mut results: Vec<Vec<Option<Grad>>> =
            bundles.iter().map(|b| vec![None; b.len()]).collect();
        for op in &plan {
            match op {
                PlannedOp::Gather(i) => {
                    let inputs: Vec<SliceGrad> = bundles
                        .iter()
                        .map(|b| match &b.entries()[*i].1 {
                            Grad::Dense(d) => d.to_slices(),
                            Grad::Slices(s) => s.clone(),
                        })
                        .collect();
                    let tag = Tag {
                        label: schema[*i].id.to_string(),
                        strategy: Some(strategy),
                        vars: Vec::new(),
                    };
                    let out = self.allgather_tagged(inputs, tag)?;
                    for (res, s) in results.iter_mut().zip(out) {
                        res[*i] = Some(Grad::Slices(s));
                    }
                }
                PlannedOp::Reduce(vars) => {
                    let width = schema[vars[0]].dtype_width;
                    let inputs: Vec<DenseGrad> = bundles
                        .iter()
                        .map(|b| {
                            let mut flat = Vec::new();
                            for &i in vars {
                                flat.extend_from_slice(materialize(&b.entries()[i].1).values());
                            }
                            let n = flat.len();
                            DenseGrad::with_dtype_width(vec![n], flat, width)
                                .expect("packed length matches shape")
                        })
                        .collect();
                    let tag = Tag {
                        label: reduce_label(schema, vars),
                        strategy: Some(strategy),
                        vars: vars
                            .iter()
                            .map(|&i| (schema[i].id.clone(), schema[i].dense_bytes()))
                            .collect(),
                    };
                    let out = self.allreduce_tagged(inputs, tag)?;
                    for (res, packed) in results.iter_mut().zip(out) {
                        let mut values = packed.into_values().into_iter();
                        for &i in vars {
                            let shape = schema[i].dense_shape.clone();
                            let n: usize = shape.iter().product();
                            let d = DenseGrad::with_dtype_width(
                                shape,
                                values.by_ref().take(n).collect(),
                                width,
                            )
                            .expect("unpacked length matches shape");
                            res[i] = Some(Grad::Dense(d));
                        }
                    }
                }
            }
        }
        results
            .into_iter()
            .map(|res| {
                let entries = schema
                    .iter()
                    .zip(res)
                    .map(|(s, g)| (s.id.clone(), g.expect("every variable is planned")))
                    .collect();
                GradBundle::from_entries(entries).map_err(CollectiveError::from)
            })
            .collect()
    }
}

/// Bundle exchange from one rank's point of view.
pub fn exchange_bundle(
    ctx: &mut RankCtx,
    bundle: &GradBundle,
    strategy: Strategy,
    fusion: FusionConfig,
) -> Result<GradBundle, CollectiveError> {
    ctx.group()
        .exchange(vec![bundle.clone()], strategy, fusion)
        .map(|mut v| v.pop().expect("one output per hosted rank"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(id: &str, elems: usize, kind: GradKind) -> VarSchema {
        VarSchema {
            id: id.into(),
            dense_shape: vec![elems],
            kind,
            rows: elems,
            dtype_width: 4,
        }
    }

    #[test]
    fn routes_follow_strategy() {
        use GradKind::*;
        let mixed = [Dense, Slices];
        let sparse = [Slices, Slices];
        let dense = [Dense, Dense];
        let r = |s, k: &[GradKind]| route(s, k.iter().copied());
        assert_eq!(r(Strategy::LegacyGather, &mixed), Route::Gather);
        assert_eq!(r(Strategy::LegacyGather, &dense), Route::Reduce);
        assert_eq!(r(Strategy::SparseAsDense, &sparse), Route::Reduce);
        assert_eq!(r(Strategy::Proposed, &mixed), Route::Reduce);
        assert_eq!(r(Strategy::Proposed, &sparse), Route::Gather);
    }

    #[test]
    fn fusion_packs_greedily_in_order() {
        let s = vec![
            schema("a", 10, GradKind::Dense),
            schema("b", 10, GradKind::Dense),
            schema("c", 10, GradKind::Dense),
            schema("big", 100, GradKind::Dense),
        ];
        let plan = plan_exchange(
            &[s.clone(), s.clone()],
            Strategy::SparseAsDense,
            FusionConfig {
                threshold_bytes: 80,
            },
        )
        .unwrap();
        assert_eq!(
            plan,
            vec![
                PlannedOp::Reduce(vec![0, 1]),
                PlannedOp::Reduce(vec![3]),
                PlannedOp::Reduce(vec![2]),
            ]
        );
        let unfused = plan_exchange(
            std::slice::from_ref(&s),
            Strategy::SparseAsDense,
            FusionConfig::disabled(),
        )
        .unwrap();
        assert_eq!(unfused.len(), 4);
    }

    #[test]
    fn schema_mismatch_aborts() {
        let a = vec![schema("a", 10, GradKind::Dense)];
        let b = vec![schema("b", 10, GradKind::Dense)];
        assert!(matches!(
            plan_exchange(&[a, b], Strategy::Proposed, FusionConfig::default()),
            Err(CollectiveError::Abort(_))
        ));
    }
}
