use std::sync::Arc;

use super::{DenseGrad, Grad, GradBundle, SliceGrad, TensorError};

/// Which local accumulation algorithm to run over a variable's contributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccumulationRule {
    /// Reduce only when every contribution is dense; any slice forces the
    /// whole list onto the gather path.
    Legacy,
    /// Reduce whenever at least one contribution is dense, densifying the
    /// slices first; gather only when every contribution is a slice.
    Proposed,
}

/// Result of accumulating one variable's contributions, tagged with the
/// branch of the dispatch that produced it.
#[derive(Debug, Clone, PartialEq)]
pub enum Accumulated {
    /// Zero contributions.
    Empty,
    /// A single contribution, returned unchanged.
    PassThrough(Grad),
    /// Every contribution was dense: elementwise sum.
    Reduced(DenseGrad),
    /// Concatenation of all contributions as slices, no summation.
    Gathered(SliceGrad),
    /// Mixed contributions converted to dense and summed.
    ConvertedAndReduced(DenseGrad),
}

impl Accumulated {
    pub fn into_grad(self) -> Option<Grad> {
        match self {
            Accumulated::Empty => None,
            Accumulated::PassThrough(g) => Some(g),
            Accumulated::Reduced(d) | Accumulated::ConvertedAndReduced(d) => Some(Grad::Dense(d)),
            Accumulated::Gathered(s) => Some(Grad::Slices(s)),
        }
    }

    pub fn grad(&self) -> Option<Grad> {
        self.clone().into_grad()
    }
}

/// Scatter-adds every stored row into a zero tensor of the dense shape.
/// Repeated indices are summed in storage order.
pub fn convert_to_dense(s: &SliceGrad) -> DenseGrad {
    let n: usize = s.dense_shape().iter().product();
    let mut values = vec![0.0; n];
    let width = s.row_width();
    for (index, row) in s.rows() {
        let dst = &mut values[index * width..(index + 1) * width];
        for (d, v) in dst.iter_mut().zip(row) {
            *d += v;
        }
    }
    DenseGrad {
        shape: s.dense_shape().to_vec(),
        values,
        dtype_width: s.dtype_width(),
    }
}

pub fn materialize(g: &Grad) -> DenseGrad {
    match g {
        Grad::Dense(d) => d.clone(),
        Grad::Slices(s) => convert_to_dense(s),
    }
}

/// Concatenates slices in input order. Indices and rows are appended as-is.
pub fn concat_slices(inputs: &[SliceGrad]) -> Result<SliceGrad, TensorError> {
    let first = inputs.first().ok_or(TensorError::EmptyInput)?;
    let mut blocks = Vec::new();
    for s in inputs {
        if s.dense_shape() != first.dense_shape() {
            return Err(TensorError::ShapeMismatch {
                left: first.dense_shape().to_vec(),
                right: s.dense_shape().to_vec(),
            });
        }
        blocks.extend(s.blocks().iter().map(Arc::clone));
    }
    Ok(SliceGrad::from_blocks(
        first.dense_shape().to_vec(),
        blocks,
        first.dtype_width(),
    ))
}

/// Elementwise sum, folded left in ascending input order.
pub fn reduce_dense(inputs: &[DenseGrad]) -> Result<DenseGrad, TensorError> {
    let (first, rest) = inputs.split_first().ok_or(TensorError::EmptyInput)?;
    let mut out = first.clone();
    for d in rest {
        if d.shape() != out.shape() {
            return Err(TensorError::ShapeMismatch {
                left: out.shape().to_vec(),
                right: d.shape().to_vec(),
            });
        }
        for (o, v) in out.values.iter_mut().zip(&d.values) {
            *o += v;
        }
    }
    Ok(out)
}

fn check_common_shape(inputs: &[Grad]) -> Result<(), TensorError> {
    if let Some((first, rest)) = inputs.split_first() {
        for g in rest {
            if g.dense_shape() != first.dense_shape() {
                return Err(TensorError::ShapeMismatch {
                    left: first.dense_shape().to_vec(),
                    right: g.dense_shape().to_vec(),
                });
            }
        }
    }
    Ok(())
}

fn gather_all(inputs: &[Grad]) -> Result<SliceGrad, TensorError> {
    let slices: Vec<SliceGrad> = inputs
        .iter()
        .map(|g| match g {
            Grad::Dense(d) => d.to_slices(),
            Grad::Slices(s) => s.clone(),
        })
        .collect();
    concat_slices(&slices)
}

fn dense_inputs(inputs: &[Grad]) -> Option<Vec<DenseGrad>> {
    inputs
        .iter()
        .map(|g| match g {
            Grad::Dense(d) => Some(d.clone()),
            Grad::Slices(_) => None,
        })
        .collect()
}

fn shared_prefix(inputs: &[Grad]) -> Result<Option<Accumulated>, TensorError> {
    check_common_shape(inputs)?;
    Ok(match inputs {
        [] => Some(Accumulated::Empty),
        [only] => Some(Accumulated::PassThrough(only.clone())),
        _ => dense_inputs(inputs)
            .map(|d| reduce_dense(&d).map(Accumulated::Reduced))
            .transpose()?,
    })
}

/// Reduce only if all inputs are dense, otherwise gather everything.
pub fn accumulate_legacy(inputs: &[Grad]) -> Result<Accumulated, TensorError> {
    if let Some(done) = shared_prefix(inputs)? {
        return Ok(done);
    }
    gather_all(inputs).map(Accumulated::Gathered)
}

/// Reduce if any input is dense (densifying slices first); gather only
/// when every input is a slice.
pub fn accumulate_proposed(inputs: &[Grad]) -> Result<Accumulated, TensorError> {
    if let Some(done) = shared_prefix(inputs)? {
        return Ok(done);
    }
    if inputs.iter().any(Grad::is_dense) {
        let converted: Vec<DenseGrad> = inputs.iter().map(materialize).collect();
        return reduce_dense(&converted).map(Accumulated::ConvertedAndReduced);
    }
    gather_all(inputs).map(Accumulated::Gathered)
}

pub fn accumulate(rule: AccumulationRule, inputs: &[Grad]) -> Result<Accumulated, TensorError> {
    match rule {
        AccumulationRule::Legacy => accumulate_legacy(inputs),
        AccumulationRule::Proposed => accumulate_proposed(inputs),
    }
}

/// Replaces every slice entry with its dense form when `sparse_as_dense` is
/// set. Dense entries and ordering are untouched.
pub fn densify_pass(bundle: &GradBundle, sparse_as_dense: bool) -> GradBundle {
    if !sparse_as_dense {
        return bundle.clone();
    }
    let entries = bundle
        .entries()
        .iter()
        .map(|(id, g)| {
            let g = match g {
                Grad::Slices(s) => Grad::Dense(convert_to_dense(s)),
                dense => dense.clone(),
            };
            (id.clone(), g)
        })
        .collect();
    GradBundle { entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(shape: &[usize], v: &[f64]) -> DenseGrad {
        DenseGrad::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn slices(shape: &[usize], idx: &[usize], v: &[f64]) -> SliceGrad {
        SliceGrad::new(shape.to_vec(), idx.to_vec(), v.to_vec()).unwrap()
    }

    /// Independent scatter-add: walks every (row, column) pair by index.
    fn brute_scatter(shape: &[usize], idx: &[usize], rows: &[f64]) -> Vec<f64> {
        let width: usize = shape[1..].iter().product();
        let mut out = vec![0.0; shape.iter().product()];
        for r in 0..shape[0] {
            for (k, &i) in idx.iter().enumerate() {
                if i == r {
                    for c in 0..width {
                        out[r * width + c] += rows[k * width + c];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn convert_scatters_without_duplicates() {
        let s = slices(&[4, 2], &[1, 3], &[1., 2., 3., 4.]);
        let d = convert_to_dense(&s);
        assert_eq!(d.shape(), &[4, 2]);
        assert_eq!(d.values(), &[0., 0., 1., 2., 0., 0., 3., 4.]);
    }

    #[test]
    fn convert_sums_duplicates() {
        let s = slices(&[3, 1], &[0, 0], &[2., 5.]);
        let expected = brute_scatter(&[3, 1], &[0, 0], &[2., 5.]);
        assert_eq!(expected, vec![7., 0., 0.]);
        assert_eq!(convert_to_dense(&s).values(), &expected[..]);
    }

    #[test]
    fn convert_empty_is_zero() {
        let s = SliceGrad::empty(vec![2, 2]).unwrap();
        assert_eq!(convert_to_dense(&s).values(), &[0.0; 4]);
    }

    #[test]
    fn concat_appends_in_order() {
        let a = slices(&[5, 1], &[0, 4], &[1., 2.]);
        let b = slices(&[5, 1], &[4, 4, 1], &[3., 4., 5.]);
        let c = concat_slices(&[a.clone(), b]).unwrap();
        assert_eq!(c.num_rows(), 5);
        assert_eq!(c.indices().collect::<Vec<_>>(), vec![0, 4, 4, 4, 1]);
        assert_eq!(c.row_values(), vec![1., 2., 3., 4., 5.]);
        assert_eq!(concat_slices(std::slice::from_ref(&a)).unwrap(), a);
    }

    #[test]
    fn concat_of_full_coverage_grows_with_inputs() {
        let (v, h) = (7, 3);
        let d = DenseGrad::filled(vec![v, h], 1.0).unwrap();
        let parts: Vec<_> = (0..64).map(|_| d.to_slices()).collect();
        let c = concat_slices(&parts).unwrap();
        assert_eq!(c.num_rows(), 64 * v);
        assert_eq!(c.nominal_byte_size(), (64 * v * h * 4) as u64);
    }

    #[test]
    fn concat_rejects_mismatch_and_empty() {
        let a = slices(&[5, 1], &[0], &[1.]);
        let b = slices(&[4, 1], &[0], &[1.]);
        assert!(matches!(
            concat_slices(&[a, b]),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert_eq!(concat_slices(&[]), Err(TensorError::EmptyInput));
    }

    #[test]
    fn reduce_sums_and_checks_shapes() {
        let r = reduce_dense(&[dense(&[1, 2], &[1., 2.]), dense(&[1, 2], &[3., 4.])]).unwrap();
        assert_eq!(r.values(), &[4., 6.]);
        let one = dense(&[2], &[1., -1.]);
        assert_eq!(reduce_dense(std::slice::from_ref(&one)).unwrap(), one);
        assert!(reduce_dense(&[dense(&[2], &[0., 0.]), dense(&[1, 2], &[0., 0.])]).is_err());
    }

    #[test]
    fn reduce_matches_serial_fold() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let inputs: Vec<DenseGrad> = (0..8)
            .map(|_| {
                dense(
                    &[3, 3],
                    &(0..9).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
                )
            })
            .collect();
        let mut oracle = [0.0f64; 9];
        for (k, slot) in oracle.iter_mut().enumerate() {
            let mut acc = inputs[0].values()[k];
            for d in &inputs[1..] {
                acc += d.values()[k];
            }
            *slot = acc;
        }
        assert_eq!(reduce_dense(&inputs).unwrap().values(), &oracle[..]);
    }

    #[test]
    fn legacy_mixed_gathers_full_coverage_rows() {
        let d = dense(&[4, 2], &[1., 1., 2., 2., 3., 3., 4., 4.]);
        let s = slices(&[4, 2], &[3, 0], &[10., 10., 20., 20.]);
        let out = accumulate_legacy(&[d.clone().into(), s.clone().into()]).unwrap();
        let Accumulated::Gathered(g) = &out else {
            panic!("expected gather, got {out:?}")
        };
        assert_eq!(g.num_rows(), 6);
        let expected = reduce_dense(&[d, convert_to_dense(&s)]).unwrap();
        assert_eq!(convert_to_dense(g), expected);
    }

    #[test]
    fn proposed_mixed_converts_and_reduces() {
        let d = dense(&[4, 2], &[1., 1., 2., 2., 3., 3., 4., 4.]);
        let s = slices(&[4, 2], &[3, 3], &[10., 10., 20., 20.]);
        let out = accumulate_proposed(&[d.clone().into(), s.clone().into()]).unwrap();
        let expected = reduce_dense(&[d, convert_to_dense(&s)]).unwrap();
        assert_eq!(out, Accumulated::ConvertedAndReduced(expected));
    }

    #[test]
    fn proposed_all_slices_matches_legacy() {
        let a: Grad = slices(&[4, 1], &[1], &[1.]).into();
        let b: Grad = slices(&[4, 1], &[2, 1], &[2., 3.]).into();
        let inputs = [a, b];
        assert_eq!(
            accumulate_proposed(&inputs).unwrap(),
            accumulate_legacy(&inputs).unwrap()
        );
    }

    #[test]
    fn pass_through_and_empty() {
        let d: Grad = dense(&[2], &[1., 2.]).into();
        assert_eq!(
            accumulate_legacy(std::slice::from_ref(&d)).unwrap(),
            Accumulated::PassThrough(d.clone())
        );
        assert_eq!(accumulate_proposed(&[]).unwrap(), Accumulated::Empty);
        assert_eq!(Accumulated::Empty.into_grad(), None);
    }

    #[test]
    fn accumulate_rejects_mismatched_shapes() {
        let a: Grad = dense(&[2], &[1., 2.]).into();
        let b: Grad = slices(&[3], &[0], &[1.]).into();
        assert!(accumulate_legacy(&[a.clone(), b.clone()]).is_err());
        assert!(accumulate_proposed(&[a, b]).is_err());
    }

    #[test]
    fn densify_pass_converts_only_slices() {
        let mut b = GradBundle::new();
        b.push("emb".into(), slices(&[4, 2], &[1, 1], &[1., 2., 3., 4.]))
            .unwrap();
        b.push("ffn".into(), dense(&[2], &[5., 6.])).unwrap();
        assert_eq!(densify_pass(&b, false), b);
        let out = densify_pass(&b, true);
        let emb = out.get(&"emb".into()).unwrap();
        assert_eq!(
            emb,
            &Grad::Dense(dense(&[4, 2], &[0., 0., 4., 6., 0., 0., 0., 0.]))
        );
        assert_eq!(out.get(&"ffn".into()), b.get(&"ffn".into()));
        assert_eq!(
            out.entries()
                .iter()
                .map(|(v, _)| v.as_str())
                .collect::<Vec<_>>(),
            vec!["emb", "ffn"]
        );
    }

    #[test]
    fn densify_all_dense_is_identity() {
        let mut b = GradBundle::new();
        b.push("a".into(), dense(&[2], &[1., 2.])).unwrap();
        assert_eq!(densify_pass(&b, true), b);
    }
}
