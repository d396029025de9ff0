//! Property tests for metric, optimizer and numeric invariants.

use nmt_core::attention::{global_attend, AttentionConfig, AttentionParams, Mechanism, ScoreKind};
use nmt_core::container::{from_bytes, to_bytes, ScalarWidth};
use nmt_core::evaluation::{aer, bleu, GoldAlignment, Links};
use nmt_core::model::{ModelConfig, NmtModel};
use nmt_core::tensor::matmul;
use nmt_core::training::clip_and_step;
use nmt_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec((0u8..6).prop_map(|c| format!("t{c}")), 0..10)
}

fn corpus() -> impl Strategy<Value = Vec<(Vec<String>, Vec<String>)>> {
    prop::collection::vec((sentence(), sentence()), 1..8)
}

fn links(max: usize) -> impl Strategy<Value = Links> {
    prop::collection::btree_set((0..max, 0..max), 0..12)
}

proptest! {
    #[test]
    fn bleu_is_order_invariant_and_bounded(pairs in corpus(), rot in 0usize..8) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let Ok(a) = bleu(&h, &r) else { return Ok(()) };
        let k = rot % pairs.len();
        let mut shuffled = pairs.clone();
        shuffled.rotate_left(k);
        let (h2, r2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        let b = bleu(&h2, &r2).unwrap();
        prop_assert!((a.score - b.score).abs() < 1e-9);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&a.score));
        prop_assert!(a.brevity_penalty > 0.0 && a.brevity_penalty <= 1.0);
    }

    #[test]
    fn bleu_of_reference_is_100(refs in prop::collection::vec(prop::collection::vec((0u8..6).prop_map(|c| format!("t{c}")), 4..10), 1..5)) {
        prop_assert!((bleu(&refs, &refs).unwrap().score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn aer_bounds(pred in links(6), sure in links(6), extra in links(6)) {
        let possible: Links = sure.union(&extra).copied().collect();
        let gold = GoldAlignment { sure: sure.clone(), possible };
        if pred.is_empty() && sure.is_empty() {
            return Ok(());
        }
        let v = aer(std::slice::from_ref(&pred), std::slice::from_ref(&gold)).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        if !sure.is_empty() {
            let exact = aer(std::slice::from_ref(&sure), std::slice::from_ref(&gold)).unwrap();
            prop_assert!(exact.abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_caps_global_norm(seed in 0u64..1000, scale in 0.01f64..50.0, clip in 0.5f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grads = vec![Tensor::uniform(&[3, 4], scale, &mut rng), Tensor::uniform(&[5], scale, &mut rng)];
        let before: Vec<Vec<f64>> = grads.iter().map(|g| g.data().to_vec()).collect();
        let mut params = [Tensor::zeros(&[3, 4]), Tensor::zeros(&[5])];
        let stats = clip_and_step(params.iter_mut().collect(), &mut grads, 1.0, clip).unwrap();
        prop_assert!(stats.clipped_norm <= clip + 1e-9);
        let step: f64 = params.iter().map(|p| p.sq_norm()).sum::<f64>().sqrt();
        prop_assert!((step - stats.clipped_norm).abs() < 1e-9);
        if stats.norm <= clip {
            // Unclipped step is exactly -lr * g.
            for (p, g) in params.iter().zip(&before) {
                prop_assert!(p.data().iter().zip(g).all(|(a, b)| *a == -b));
            }
        }
    }

    #[test]
    fn matmul_matches_naive(seed in 0u64..1000, m in 1usize..6, k in 1usize..6, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::uniform(&[m, k], 1.0, &mut rng);
        let b = Tensor::uniform(&[k, n], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|l| a.at2(i, l) * b.at2(l, j)).sum();
                prop_assert!((c.at2(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_weights_are_a_distribution(seed in 0u64..1000, s in 1usize..10, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttentionParams::init(&AttentionConfig::new(Mechanism::Global, ScoreKind::General), n, &mut rng).unwrap();
        let h = Tensor::uniform(&[n], 1.0, &mut rng);
        let states: Vec<Tensor> = (0..s).map(|_| Tensor::uniform(&[n], 1.0, &mut rng)).collect();
        let out = global_attend(&h, &states, &params, ScoreKind::General, None).unwrap();
        prop_assert!((out.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(out.weights.iter().all(|&w| w > 0.0));
        // Context is the weighted average of the states.
        for d in 0..n {
            let want: f64 = states.iter().zip(&out.weights).map(|(st, w)| w * st.data()[d]).sum();
            prop_assert!((out.context.data()[d] - want).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn container_round_trips(seed in 0u64..1000, layers in 1usize..3, feeding: bool) {
        let cfg = ModelConfig {
            layers,
            cells: 4,
            src_vocab: 7,
            tgt_vocab: 5,
            attention: Some(AttentionConfig::new(Mechanism::LocalP, ScoreKind::Concat).with_window(2)),
            input_feeding: feeding,
            reverse_source: true,
        };
        let model = NmtModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let back = from_bytes(&to_bytes(&model, ScalarWidth::F64)).unwrap();
        prop_assert_eq!(back, model);
    }
}
