use proptest::prelude::*;

use gradsync::collectives::{run_world, ExecMode, FusionConfig, Strategy as Exchange};
use gradsync::costmodel::{predict_gather_bytes, LinkModel};
use gradsync::tensor::{
    concat_slices, convert_to_dense, densify_pass, materialize, reduce_dense, DenseGrad, Grad,
    GradBundle, SliceGrad,
};

fn slices(v: usize, h: usize) -> impl Strategy<Value = SliceGrad> {
    prop::collection::vec((0..v, prop::collection::vec(-4.0f64..4.0, h)), 0..12).prop_map(
        move |rows| {
            let idx = rows.iter().map(|r| r.0).collect();
            let vals = rows.into_iter().flat_map(|r| r.1).collect();
            SliceGrad::new(vec![v, h], idx, vals).unwrap()
        },
    )
}

fn shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..10, 1usize..5)
}

proptest! {
    #[test]
    fn densify_then_reduce_equals_gather_then_materialize(
        (v, h, parts) in shape().prop_flat_map(|(v, h)| (Just(v), Just(h), prop::collection::vec(slices(v, h), 1..5)))
    ) {
        let gathered = convert_to_dense(&concat_slices(&parts).unwrap());
        let dense: Vec<DenseGrad> = parts.iter().map(convert_to_dense).collect();
        let reduced = reduce_dense(&dense).unwrap();
        prop_assert_eq!(reduced.shape(), &[v, h][..]);
        for (a, b) in gathered.values().iter().zip(reduced.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn concat_is_associative_and_counts_rows(
        (a, b, c) in shape().prop_flat_map(|(v, h)| (slices(v, h), slices(v, h), slices(v, h)))
    ) {
        let left = concat_slices(&[concat_slices(&[a.clone(), b.clone()]).unwrap(), c.clone()]).unwrap();
        let right = concat_slices(&[a.clone(), concat_slices(&[b.clone(), c.clone()]).unwrap()]).unwrap();
        prop_assert_eq!(&left, &right);
        prop_assert_eq!(left.num_rows(), a.num_rows() + b.num_rows() + c.num_rows());
        prop_assert_eq!(
            left.buffer_byte_size(),
            a.buffer_byte_size() + b.buffer_byte_size() + c.buffer_byte_size()
        );
    }

    #[test]
    fn densify_pass_preserves_values(
        (s, flag) in shape().prop_flat_map(|(v, h)| (slices(v, h), any::<bool>()))
    ) {
        let mut b = GradBundle::new();
        b.push("x".into(), s.clone()).unwrap();
        let out = densify_pass(&b, flag);
        let g = out.get(&"x".into()).unwrap();
        prop_assert_eq!(g.is_dense(), flag);
        prop_assert_eq!(materialize(g), convert_to_dense(&s));
    }

    #[test]
    fn measured_gather_bytes_match_prediction(
        world in 1usize..7,
        rows in prop::collection::vec(0usize..9, 7),
        h in 1usize..6,
    ) {
        let rows = &rows[..world];
        let run = run_world(world, ExecMode::Serialized, LinkModel::default(), 0, |group| {
            let inputs = group
                .ranks()
                .iter()
                .map(|&r| {
                    let idx = (0..rows[r]).map(|k| k % 9).collect();
                    SliceGrad::new(vec![9, h], idx, vec![1.0; rows[r] * h]).unwrap()
                })
                .collect();
            group.allgather(inputs)
        }).unwrap();
        let rows64: Vec<u64> = rows.iter().map(|&r| r as u64).collect();
        let expect = predict_gather_bytes(world, &rows64, h as u64, 4).unwrap();
        for s in &run.stats {
            prop_assert_eq!(s.records[0].buffer_bytes, expect);
        }
    }

    #[test]
    fn strategies_agree_on_mixed_bundles(
        world in 1usize..5,
        seed in any::<u64>(),
        threshold in 0u64..256,
    ) {
        let make = |rank: usize| {
            let mut b = GradBundle::new();
            let k = (seed as usize).wrapping_add(rank);
            let g: Grad = if k.is_multiple_of(2) {
                DenseGrad::new(vec![3, 2], (0..6).map(|i| (i + k % 5) as f64).collect()).unwrap().into()
            } else {
                SliceGrad::new(vec![3, 2], vec![k % 3], vec![1.5, -2.0]).unwrap().into()
            };
            b.push("e".into(), g).unwrap();
            b.push("d".into(), DenseGrad::filled(vec![5], rank as f64).unwrap()).unwrap();
            b
        };
        let mut outs = Vec::new();
        for strategy in Exchange::ALL {
            let run = run_world(world, ExecMode::Serialized, LinkModel::default(), 0, |group| {
                let bundles = group.ranks().iter().map(|&r| make(r)).collect();
                group.exchange(bundles, strategy, FusionConfig { threshold_bytes: threshold })
            }).unwrap();
            outs.push(
                run.outputs[0]
                    .iter()
                    .map(|(_, g)| materialize(g).into_values())
                    .collect::<Vec<_>>(),
            );
        }
        prop_assert_eq!(&outs[0], &outs[1]);
        prop_assert_eq!(&outs[0], &outs[2]);
    }
}
