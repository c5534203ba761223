use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lgmnet::checkpoint::{decode_table, encode_table};
use lgmnet::data::{generate_dataset, permute_support, sample_task, split_meta, SplitSide};
use lgmnet::eval::majority;
use lgmnet::metanet::{ContextDraw, MetaNet, MetaNetConfig};
use lgmnet::tape::Tape;
use lgmnet::targetnet::{classify, TargetArchitecture};
use lgmnet::tensor::Tensor;
use lgmnet::training::lr_at;

fn net(seed: u64, weight_norm: bool) -> MetaNet {
    let config = MetaNetConfig {
        weight_norm,
        ..MetaNetConfig::default()
    };
    MetaNet::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn points(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.2f32..1.2, n * 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_rows_have_unit_norm(seed in 0u64..1000, c in prop::collection::vec(-4.0f32..4.0, 16)) {
        for (w, _) in &net(seed, true).weights_from_context(&c).unwrap().layers {
            for row in w.data().chunks(w.shape()[1]) {
                let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
                prop_assert!((norm - 1.0).abs() <= 1e-5, "norm {norm}");
            }
        }
    }

    #[test]
    fn context_is_order_invariant(seed in 0u64..1000, data in points(6), shift in 1usize..6) {
        let m = net(seed, true);
        let support = Tensor::new(vec![6, 2], data.clone()).unwrap();
        let rotated: Vec<f32> = (0..6).flat_map(|r| data[((r + shift) % 6) * 2..][..2].to_vec()).collect();
        let a = m.task_context(&support, &ContextDraw::Mean).unwrap();
        let b = m.task_context(&Tensor::new(vec![6, 2], rotated).unwrap(), &ContextDraw::Mean).unwrap();
        prop_assert_eq!(a.mu, b.mu);
        prop_assert_eq!(&a.sigma, &b.sigma);
        prop_assert!(a.sigma.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn match_probabilities_are_distributions(seed in 0u64..1000, s in points(5), q in points(7)) {
        let m = net(seed, true);
        let support = Tensor::new(vec![5, 2], s).unwrap();
        let w = m.weights_for(&support, &ContextDraw::Mean).unwrap();
        let onehot = lgmnet::data::onehot(&[0, 1, 2, 3, 4], 5);
        let res = classify(&TargetArchitecture::default(), &w.layers, &support, &onehot, &Tensor::new(vec![7, 2], q).unwrap()).unwrap();
        for r in 0..7 {
            let row = res.probs.row(r);
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
        prop_assert!(res.predictions.iter().all(|&p| p < 5));
    }

    #[test]
    fn permuting_support_keeps_predictions(seed in 0u64..200, perm_seed in 0u64..200) {
        let ds = generate_dataset("blobs", 1).unwrap();
        let split = split_meta(&ds, 1).unwrap();
        let task = sample_task(&ds, split.side(SplitSide::Test), 5, 2, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut perm: Vec<usize> = (0..10).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let moved = permute_support(&task, &perm).unwrap();
        let m = net(seed, true);
        let arch = TargetArchitecture::default();
        let wa = m.weights_for(&task.support, &ContextDraw::Mean).unwrap();
        let wb = m.weights_for(&moved.support, &ContextDraw::Mean).unwrap();
        prop_assert_eq!(&wa, &wb);
        let a = classify(&arch, &wa.layers, &task.support, &task.support_onehot(), &task.query).unwrap();
        let b = classify(&arch, &wb.layers, &moved.support, &moved.support_onehot(), &moved.query).unwrap();
        prop_assert_eq!(a.predictions, b.predictions);
    }

    #[test]
    fn reduce_mean_ignores_row_order(data in prop::collection::vec(-100.0f32..100.0, 24), shift in 1usize..8) {
        let rows = 8;
        let rotated: Vec<f32> = (0..rows).flat_map(|r| data[((r + shift) % rows) * 3..][..3].to_vec()).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![rows, 3], data).unwrap());
        let b = tape.constant(Tensor::new(vec![rows, 3], rotated).unwrap());
        let ma = tape.reduce_mean(a, 0).unwrap();
        let mb = tape.reduce_mean(b, 0).unwrap();
        prop_assert_eq!(tape.value(ma).data(), tape.value(mb).data());
    }

    #[test]
    fn tensor_table_round_trips(values in prop::collection::vec(any::<f32>(), 4..40), rows in 1usize..5) {
        let n = values.len() / rows * rows;
        let t = Tensor::new(vec![rows, n / rows], values[..n].to_vec()).unwrap();
        let entries = vec![("param.x".to_string(), t.clone()), ("v".to_string(), Tensor::vector(vec![1.5, -0.0]))];
        let back = decode_table(&encode_table(&entries)).unwrap();
        prop_assert_eq!(back.len(), 2);
        prop_assert_eq!(&back[0].0, "param.x");
        prop_assert_eq!(back[0].1.shape(), t.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back[0].1), bits(&t));
        prop_assert_eq!(bits(&back[1].1), bits(&entries[1].1));
    }

    #[test]
    fn learning_rate_never_increases(b in 0u64..200_000) {
        prop_assert!(lr_at(b + 1) <= lr_at(b));
        prop_assert!(lr_at(b) > 0.0 && lr_at(b) <= 1e-3);
    }

    #[test]
    fn majority_picks_a_maximum(counts in prop::collection::vec(0usize..10, 1..8)) {
        let i = majority(&counts);
        let best = *counts.iter().max().unwrap();
        prop_assert_eq!(counts[i], best);
        prop_assert!(counts[..i].iter().all(|&c| c < best));
    }
}
