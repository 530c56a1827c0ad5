//! Synthetic gradients with the tied embedding/projection pattern, and a
//! tiny tied-weight softmax model for end-to-end training checks.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collectives::{run_world, CollectiveError, ExecMode, FusionConfig, Strategy};
use crate::costmodel::LinkModel;
use crate::tensor::{materialize, DenseGrad, SliceGrad, StepGrads, TensorError, VarId};

/// Name of the shared embedding/projection variable.
pub const TIED_VAR: &str = "embedding";

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub vocab: usize,
    pub hidden: usize,
    pub tokens_per_rank: usize,
    /// Shapes of additional dense-only variables (attention, FFN weights).
    pub extra_dense_vars: Vec<Vec<usize>>,
    pub seed: u64,
    /// Whether the tied embedding/projection variable is present.
    pub tied: bool,
    pub dtype_width: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            vocab: 2048,
            hidden: 64,
            tokens_per_rank: 256,
            extra_dense_vars: Vec::new(),
            seed: 0,
            tied: true,
            dtype_width: crate::tensor::DEFAULT_DTYPE_WIDTH,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.vocab < 2 {
            return Err(WorkloadError::Invalid("vocab must be >= 2".into()));
        }
        if self.hidden < 1 {
            return Err(WorkloadError::Invalid("hidden must be >= 1".into()));
        }
        if self.dtype_width < 1 {
            return Err(WorkloadError::Invalid("dtype_width must be >= 1".into()));
        }
        if let Some(bad) = self
            .extra_dense_vars
            .iter()
            .find(|s| s.is_empty() || s.contains(&0))
        {
            return Err(WorkloadError::Invalid(format!(
                "extra dense variable shape {bad:?} has a zero or missing extent"
            )));
        }
        Ok(())
    }

    pub fn extra_var_id(i: usize) -> VarId {
        VarId::new(format!("dense_{i}"))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless keyed generator: the stream for `(seed, rank, step, lane)` is
/// independent of how many other streams were drawn before it.
pub fn keyed_rng(seed: u64, rank: u64, step: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let stream =
        splitmix64(splitmix64(splitmix64(rank) ^ step.rotate_left(21)) ^ lane.rotate_left(42));
    rng.set_stream(stream);
    rng
}

// Lanes keep draws for different purposes apart.
const LANE_TOKENS: u64 = 1;
const LANE_TARGETS: u64 = 2;
const LANE_LOOKUP: u64 = 3;
const LANE_PROJECTION: u64 = 4;
const LANE_INIT: u64 = 5;
const LANE_EXTRA: u64 = 100;

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Synthetic gradients for one rank and step.
///
/// The tied variable receives two contributions: a slice gradient with
/// `tokens_per_rank` rows at drawn token ids (the lookup path) and a dense
/// `[vocab, hidden]` gradient (the projection path). Each extra variable
/// receives one dense contribution.
pub fn gen_bundle(
    spec: &WorkloadSpec,
    rank: usize,
    step: usize,
) -> Result<StepGrads, WorkloadError> {
    spec.validate()?;
    let (rank, step) = (rank as u64, step as u64);
    let mut grads = StepGrads::new();
    if spec.tied {
        let shape = vec![spec.vocab, spec.hidden];
        let mut rng = keyed_rng(spec.seed, rank, step, LANE_TOKENS);
        let indices: Vec<usize> = (0..spec.tokens_per_rank)
            .map(|_| rng.gen_range(0..spec.vocab))
            .collect();
        let mut rng = keyed_rng(spec.seed, rank, step, LANE_LOOKUP);
        let rows = uniform(&mut rng, indices.len() * spec.hidden);
        grads.add(
            TIED_VAR.into(),
            SliceGrad::with_dtype_width(shape.clone(), indices, rows, spec.dtype_width)?,
        );
        let mut rng = keyed_rng(spec.seed, rank, step, LANE_PROJECTION);
        let dense = uniform(&mut rng, spec.vocab * spec.hidden);
        grads.add(
            TIED_VAR.into(),
            DenseGrad::with_dtype_width(shape, dense, spec.dtype_width)?,
        );
    }
    for (i, shape) in spec.extra_dense_vars.iter().enumerate() {
        let mut rng = keyed_rng(spec.seed, rank, step, LANE_EXTRA + i as u64);
        let n = shape.iter().product();
        grads.add(
            WorkloadSpec::extra_var_id(i),
            DenseGrad::with_dtype_width(shape.clone(), uniform(&mut rng, n), spec.dtype_width)?,
        );
    }
    Ok(grads)
}

/// One tied weight matrix `W` (vocab x hidden) used both to embed the
/// input tokens and to project the pooled embedding back onto the vocab.
#[derive(Debug, Clone, PartialEq)]
pub struct TiedToyModel {
    weights: DenseGrad,
    tokens: Vec<usize>,
    targets: Vec<usize>,
}

impl TiedToyModel {
    pub fn new(
        weights: DenseGrad,
        tokens: Vec<usize>,
        targets: Vec<usize>,
    ) -> Result<Self, WorkloadError> {
        if weights.shape().len() != 2 {
            return Err(WorkloadError::Invalid("weights must be a matrix".into()));
        }
        let vocab = weights.shape()[0];
        if tokens.is_empty() || targets.is_empty() {
            return Err(WorkloadError::Invalid(
                "tokens and targets must be non-empty".into(),
            ));
        }
        if let Some(t) = tokens.iter().chain(&targets).find(|&&t| t >= vocab) {
            return Err(WorkloadError::Invalid(format!(
                "id {t} out of range for vocab {vocab}"
            )));
        }
        Ok(Self {
            weights,
            tokens,
            targets,
        })
    }

    pub fn weights(&self) -> &DenseGrad {
        &self.weights
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    fn pooled(&self) -> Vec<f64> {
        let h = self.weights.shape()[1];
        let w = self.weights.values();
        let mut e = vec![0.0; h];
        for &t in &self.tokens {
            for (acc, v) in e.iter_mut().zip(&w[t * h..(t + 1) * h]) {
                *acc += v;
            }
        }
        let b = self.tokens.len() as f64;
        e.iter_mut().for_each(|x| *x /= b);
        e
    }

    fn logits(&self, e: &[f64]) -> Vec<f64> {
        let h = e.len();
        self.weights
            .values()
            .chunks_exact(h)
            .map(|row| row.iter().zip(e).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Mean cross-entropy of `softmax(W e)` over the targets, where `e` is
    /// the mean of the token rows of `W`.
    pub fn loss(&self) -> f64 {
        let z = self.logits(&self.pooled());
        let lse = log_sum_exp(&z);
        let t = self.targets.len() as f64;
        self.targets.iter().map(|&y| lse - z[y]).sum::<f64>() / t
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Loss and exact gradient of `W`, split by path: the lookup path yields a
/// slice gradient with one row per input token, the projection path a
/// dense gradient. Both are contributions to [`TIED_VAR`].
pub fn toy_forward_backward(model: &TiedToyModel) -> Result<(f64, StepGrads), WorkloadError> {
    let shape = model.weights.shape().to_vec();
    let (v, h) = (shape[0], shape[1]);
    let w = model.weights.values();
    let e = model.pooled();
    let z = model.logits(&e);
    let lse = log_sum_exp(&z);
    let t = model.targets.len() as f64;
    let loss = model.targets.iter().map(|&y| lse - z[y]).sum::<f64>() / t;

    // dL/dz = softmax(z) - empirical target distribution.
    let mut dz: Vec<f64> = z.iter().map(|zi| (zi - lse).exp()).collect();
    for &y in &model.targets {
        dz[y] -= 1.0 / t;
    }

    let mut projection = vec![0.0; v * h];
    for (row, &g) in projection.chunks_exact_mut(h).zip(&dz) {
        for (p, ei) in row.iter_mut().zip(&e) {
            *p = g * ei;
        }
    }

    // dL/de = W^T dz, shared equally by every pooled token row.
    let mut de = vec![0.0; h];
    for (row, &g) in w.chunks_exact(h).zip(&dz) {
        for (d, wi) in de.iter_mut().zip(row) {
            *d += g * wi;
        }
    }
    let b = model.tokens.len() as f64;
    let row: Vec<f64> = de.iter().map(|d| d / b).collect();
    let lookup_rows: Vec<f64> = model
        .tokens
        .iter()
        .flat_map(|_| row.iter().copied())
        .collect();

    let width = model.weights.dtype_width();
    let mut grads = StepGrads::new();
    grads.add(
        TIED_VAR.into(),
        SliceGrad::with_dtype_width(shape.clone(), model.tokens.clone(), lookup_rows, width)?,
    );
    grads.add(
        TIED_VAR.into(),
        DenseGrad::with_dtype_width(shape, projection, width)?,
    );
    Ok((loss, grads))
}

/// Deterministic batch for one rank and step.
pub fn draw_batch(spec: &WorkloadSpec, rank: usize, step: usize) -> (Vec<usize>, Vec<usize>) {
    let draw = |lane| {
        let mut rng = keyed_rng(spec.seed, rank as u64, step as u64, lane);
        (0..spec.tokens_per_rank.max(1))
            .map(|_| rng.gen_range(0..spec.vocab))
            .collect::<Vec<_>>()
    };
    (draw(LANE_TOKENS), draw(LANE_TARGETS))
}

/// Initial weights drawn once from the seed.
pub fn init_weights(spec: &WorkloadSpec) -> Result<DenseGrad, WorkloadError> {
    let mut rng = keyed_rng(spec.seed, 0, 0, LANE_INIT);
    let values = (0..spec.vocab * spec.hidden)
        .map(|_| rng.gen_range(-0.5..0.5))
        .collect();
    Ok(DenseGrad::with_dtype_width(
        vec![spec.vocab, spec.hidden],
        values,
        spec.dtype_width,
    )?)
}

fn fingerprint(d: &DenseGrad) -> u64 {
    let mut h = DefaultHasher::new();
    for v in d.values() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final weights, one per rank.
    pub weights: Vec<DenseGrad>,
    /// Per rank, a bit-level fingerprint of the weights after every step.
    pub step_fingerprints: Vec<Vec<u64>>,
    /// Per rank, the local loss at every step (before the update).
    pub losses: Vec<Vec<f64>>,
}

/// Synchronous data-parallel SGD on the toy model.
///
/// Rank 0's initial weights are broadcast; each step every rank computes
/// its local gradient contributions, accumulates them with the strategy's
/// local rule, exchanges, and applies `W -= lr / world * total`.
pub fn train_steps(
    spec: &WorkloadSpec,
    world: usize,
    steps: usize,
    strategy: Strategy,
    learning_rate: f64,
    mode: ExecMode,
) -> Result<TrainOutcome, WorkloadError> {
    spec.validate()?;
    if world == 0 {
        return Err(WorkloadError::Invalid("world size must be >= 1".into()));
    }
    let initial = init_weights(spec)?;
    let zeros = DenseGrad::with_dtype_width(
        initial.shape().to_vec(),
        vec![0.0; initial.len()],
        spec.dtype_width,
    )?;
    let fusion = FusionConfig::default();
    let rule = strategy.local_rule();
    let run = run_world(world, mode, LinkModel::default(), 0, |group| {
        let ranks = group.ranks().to_vec();
        let seeds = ranks
            .iter()
            .map(|&r| {
                if r == 0 {
                    initial.clone()
                } else {
                    zeros.clone()
                }
            })
            .collect();
        let mut weights = group.broadcast(seeds, 0)?;
        let mut prints = vec![Vec::with_capacity(steps); ranks.len()];
        let mut losses = vec![Vec::with_capacity(steps); ranks.len()];
        let scale = learning_rate / world as f64;
        for step in 0..steps {
            let mut bundles = Vec::with_capacity(ranks.len());
            for (local, &rank) in ranks.iter().enumerate() {
                let (tokens, targets) = draw_batch(spec, rank, step);
                let model = TiedToyModel::new(weights[local].clone(), tokens, targets)
                    .map_err(|e| CollectiveError::Abort(e.to_string()))?;
                let (loss, grads) = toy_forward_backward(&model)
                    .map_err(|e| CollectiveError::Abort(e.to_string()))?;
                losses[local].push(loss);
                bundles.push(grads.accumulate(rule)?);
            }
            let exchanged = group.exchange(bundles, strategy, fusion)?;
            for (local, bundle) in exchanged.iter().enumerate() {
                let total = materialize(bundle.get(&TIED_VAR.into()).expect("tied gradient"));
                for (w, g) in weights[local].values_mut().iter_mut().zip(total.values()) {
                    *w -= scale * g;
                }
                prints[local].push(fingerprint(&weights[local]));
            }
        }
        Ok(weights
            .into_iter()
            .zip(prints)
            .zip(losses)
            .map(|((w, p), l)| (w, p, l))
            .collect())
    })?;
    let mut out = TrainOutcome {
        weights: Vec::new(),
        step_fingerprints: Vec::new(),
        losses: Vec::new(),
    };
    for (w, p, l) in run.outputs {
        out.weights.push(w);
        out.step_fingerprints.push(p);
        out.losses.push(l);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{accumulate_legacy, accumulate_proposed, Accumulated, Grad};

    fn small() -> WorkloadSpec {
        WorkloadSpec {
            vocab: 8,
            hidden: 2,
            tokens_per_rank: 3,
            extra_dense_vars: vec![vec![3, 3]],
            seed: 42,
            ..WorkloadSpec::default()
        }
    }

    #[test]
    fn gen_bundle_is_deterministic() {
        let s = small();
        assert_eq!(gen_bundle(&s, 0, 0).unwrap(), gen_bundle(&s, 0, 0).unwrap());
        assert_ne!(gen_bundle(&s, 0, 0).unwrap(), gen_bundle(&s, 0, 1).unwrap());
    }

    #[test]
    fn gen_bundle_shape_of_tied_var() {
        let g = gen_bundle(&small(), 1, 2).unwrap();
        let tied = g.contributions(&TIED_VAR.into()).unwrap();
        assert_eq!(tied.len(), 2);
        assert!(matches!(&tied[0], Grad::Slices(s) if s.num_rows() == 3));
        assert!(matches!(&tied[1], Grad::Dense(d) if d.shape() == [8, 2]));
        assert_eq!(g.entries().len(), 2);
    }

    #[test]
    fn ranks_draw_different_indices() {
        let s = WorkloadSpec {
            vocab: 1000,
            tokens_per_rank: 1000,
            ..small()
        };
        let idx = |rank| match &gen_bundle(&s, rank, 0)
            .unwrap()
            .contributions(&TIED_VAR.into())
            .unwrap()[0]
        {
            Grad::Slices(sl) => sl.indices().collect::<Vec<_>>(),
            _ => unreachable!(),
        };
        let (a, b) = (idx(0), idx(1));
        let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
        // Expected coincidences for independent uniform draws: 1000 / 1000 = 1.
        assert!(same < 20, "{same} coincident draws");
    }

    #[test]
    fn zero_tokens_gives_empty_slices() {
        let s = WorkloadSpec {
            tokens_per_rank: 0,
            ..small()
        };
        let g = gen_bundle(&s, 0, 0).unwrap();
        let tied = g.contributions(&TIED_VAR.into()).unwrap();
        assert!(matches!(&tied[0], Grad::Slices(sl) if sl.num_rows() == 0));
        assert!(tied[1].is_dense());
    }

    #[test]
    fn tied_var_accumulates_by_rule() {
        let g = gen_bundle(&small(), 0, 0).unwrap();
        let tied = g.contributions(&TIED_VAR.into()).unwrap();
        assert!(matches!(
            accumulate_legacy(tied).unwrap(),
            Accumulated::Gathered(_)
        ));
        assert!(matches!(
            accumulate_proposed(tied).unwrap(),
            Accumulated::ConvertedAndReduced(_)
        ));
    }

    #[test]
    fn single_token_loss_by_hand() {
        // W rows: [1, 0], [0, 1], [0.5, 0.5]; token 0, target 0.
        let w = DenseGrad::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        let m = TiedToyModel::new(w, vec![0], vec![0]).unwrap();
        // e = [1, 0]; logits = [1, 0, 0.5].
        let expected = -(1f64.exp() / (1f64.exp() + 1.0 + 0.5f64.exp())).ln();
        let (loss, _) = toy_forward_backward(&m).unwrap();
        assert!((loss - expected).abs() < 1e-15);
        assert!((m.loss() - expected).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_symmetric_gradient() {
        // All-zero weights: every logit is 0, softmax is uniform.
        let w = DenseGrad::zeros(vec![4, 2]).unwrap();
        let m = TiedToyModel::new(w, vec![1, 2], vec![3]).unwrap();
        let (loss, _) = toy_forward_backward(&m).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn doubling_logits_sharpens_softmax() {
        let w = DenseGrad::new(vec![2, 1], vec![1.0, -1.0]).unwrap();
        let m = TiedToyModel::new(w.clone(), vec![0], vec![0]).unwrap();
        let w2 = DenseGrad::new(vec![2, 1], vec![2f64.sqrt(), -(2f64.sqrt())]).unwrap();
        let m2 = TiedToyModel::new(w2, vec![0], vec![0]).unwrap();
        // logits [1, -1] vs [2, -2]: loss = ln(1 + e^{-2}) vs ln(1 + e^{-4}).
        assert!((m.loss() - (1.0 + (-2f64).exp()).ln()).abs() < 1e-15);
        assert!((m2.loss() - (1.0 + (-4f64).exp()).ln()).abs() < 1e-14);
    }

    #[test]
    fn rejects_out_of_vocab_ids() {
        let w = DenseGrad::zeros(vec![4, 2]).unwrap();
        assert!(TiedToyModel::new(w.clone(), vec![4], vec![0]).is_err());
        assert!(TiedToyModel::new(w, vec![], vec![0]).is_err());
    }

    #[test]
    fn loss_decreases_on_fixed_instance() {
        let spec = WorkloadSpec {
            vocab: 6,
            hidden: 3,
            tokens_per_rank: 5,
            seed: 3,
            ..WorkloadSpec::default()
        };
        let (tokens, targets) = draw_batch(&spec, 0, 0);
        let mut w = init_weights(&spec).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let m = TiedToyModel::new(w.clone(), tokens.clone(), targets.clone()).unwrap();
            let (loss, grads) = toy_forward_backward(&m).unwrap();
            assert!(loss <= prev + 1e-12, "loss rose from {prev} to {loss}");
            prev = loss;
            let g = materialize(
                &accumulate_proposed(grads.contributions(&TIED_VAR.into()).unwrap())
                    .unwrap()
                    .into_grad()
                    .unwrap(),
            );
            for (wi, gi) in w.values_mut().iter_mut().zip(g.values()) {
                *wi -= 0.1 * gi;
            }
        }
    }

    #[test]
    fn single_rank_strategies_agree_bitwise() {
        let spec = WorkloadSpec {
            vocab: 6,
            hidden: 3,
            tokens_per_rank: 4,
            seed: 9,
            ..WorkloadSpec::default()
        };
        let runs: Vec<_> = Strategy::ALL
            .iter()
            .map(|&s| train_steps(&spec, 1, 10, s, 0.1, ExecMode::Serialized).unwrap())
            .collect();
        for r in &runs[1..] {
            assert_eq!(r.weights, runs[0].weights);
        }
    }
}
