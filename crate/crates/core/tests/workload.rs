use gradsync::collectives::{ExecMode, Strategy};
use gradsync::tensor::{accumulate, materialize, AccumulationRule, DenseGrad};
use gradsync::workload::{
    draw_batch, gen_bundle, init_weights, toy_forward_backward, train_steps, TiedToyModel,
    WorkloadSpec, TIED_VAR,
};

#[test]
fn finite_differences_on_larger_models() {
    for (v, h, seed) in [(10usize, 4usize, 1u64), (17, 2, 2), (8, 8, 3)] {
        let spec = WorkloadSpec {
            vocab: v,
            hidden: h,
            tokens_per_rank: 6,
            seed,
            ..WorkloadSpec::default()
        };
        let w = init_weights(&spec).unwrap();
        let (tokens, targets) = draw_batch(&spec, 1, 0);
        let model = |w: DenseGrad| TiedToyModel::new(w, tokens.clone(), targets.clone()).unwrap();
        let (loss, grads) = toy_forward_backward(&model(w.clone())).unwrap();
        assert_eq!(loss, model(w.clone()).loss());
        let parts = grads.contributions(&TIED_VAR.into()).unwrap();
        let g = materialize(
            &accumulate(AccumulationRule::Legacy, parts)
                .unwrap()
                .into_grad()
                .unwrap(),
        );
        let step = 1e-5;
        for k in 0..v * h {
            let shift = |d: f64| {
                let mut x = w.clone();
                x.values_mut()[k] += d;
                model(x).loss()
            };
            let fd = (shift(step) - shift(-step)) / (2.0 * step);
            let a = g.values()[k];
            assert!(
                (a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1e-3),
                "V={v} H={h} k={k}: {a} vs {fd}"
            );
        }
    }
}

#[test]
fn generated_bundles_are_deterministic_and_shaped() {
    let spec = WorkloadSpec {
        vocab: 40,
        hidden: 3,
        tokens_per_rank: 11,
        extra_dense_vars: vec![vec![4, 4], vec![9]],
        seed: 5,
        ..WorkloadSpec::default()
    };
    let a = gen_bundle(&spec, 3, 2).unwrap();
    assert_eq!(a, gen_bundle(&spec, 3, 2).unwrap());
    assert_ne!(a, gen_bundle(&spec, 4, 2).unwrap());
    assert_ne!(a, gen_bundle(&spec, 3, 3).unwrap());
    let tied = a.contributions(&TIED_VAR.into()).unwrap();
    assert_eq!(tied.len(), 2);
    assert_eq!(tied[0].stored_rows(), 11);
    assert!(tied[1].is_dense());
    assert_eq!(a.entries().len(), 3);
}

#[test]
fn spec_round_trips_through_json() {
    let spec = WorkloadSpec {
        extra_dense_vars: vec![vec![2, 3]],
        tied: false,
        ..WorkloadSpec::default()
    };
    let text = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<WorkloadSpec>(&text).unwrap(), spec);
}

#[test]
fn training_lowers_loss_and_modes_agree() {
    let spec = WorkloadSpec {
        vocab: 12,
        hidden: 4,
        tokens_per_rank: 5,
        seed: 11,
        ..WorkloadSpec::default()
    };
    let a = train_steps(&spec, 3, 20, Strategy::Proposed, 0.5, ExecMode::Concurrent).unwrap();
    let b = train_steps(&spec, 3, 20, Strategy::Proposed, 0.5, ExecMode::Serialized).unwrap();
    assert_eq!(a.step_fingerprints, b.step_fingerprints);
    assert_eq!(a.losses, b.losses);
    for rank in 1..3 {
        assert_eq!(a.step_fingerprints[rank], a.step_fingerprints[0]);
    }
}
