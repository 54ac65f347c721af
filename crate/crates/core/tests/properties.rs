//! Property tests for the invariants of scores, masks, metrics, schedules
//! and serialized models.

use pifs_core::data::LabelMask;
use pifs_core::metrics::{harmonic_mean, ConfusionAccumulator};
use pifs_core::nn::checkpoint::{decode_tensors, encode_tensors, model_from_tensors, model_tensors};
use pifs_core::nn::{cosine_scores, ModelConfig, SegModel};
use pifs_core::protocol::{make_folds, poly_lr, relabel_strict};
use pifs_core::rng::rng_for;
use pifs_core::tensor::{Graph, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;

fn mask(labels: Vec<u8>) -> LabelMask {
    let n = labels.len();
    LabelMask::new(1, n, labels).unwrap()
}

proptest! {
    #[test]
    fn cosine_scores_are_bounded_by_tau(
        (p, d, c) in (1usize..6, 1usize..6, 1usize..5),
        seed in any::<u64>(),
        tau in 0.1f64..20.0,
    ) {
        let mut rng = rng_for(seed, &[]);
        let draw = |n: usize, rng: &mut pifs_core::rng::Rng| -> Vec<f64> {
            use rand::Rng as _;
            (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
        };
        let mut g = Graph::new();
        let f = g.constant(&Tensor::new(vec![p, d], draw(p * d, &mut rng)).unwrap());
        let w = g.constant(&Tensor::new(vec![d, c], draw(d * c, &mut rng)).unwrap());
        let t = g.constant(&Tensor::scalar(tau));
        let s = cosine_scores(&mut g, f, w, t).unwrap();
        prop_assert_eq!(g.shape(s), &[p, c]);
        for &v in g.value(s) {
            prop_assert!(v.abs() <= tau + 1e-9, "{} > {}", v, tau);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..5, vals in vec(-50.0f64..50.0, 16)) {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(vec![rows, cols], vals[..rows * cols].to_vec()).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn strict_relabel_is_idempotent(labels in vec(0u8..9, 1..64), old in vec(1u8..9, 0..5)) {
        let once = relabel_strict(&mask(labels.clone()), &old);
        prop_assert_eq!(&relabel_strict(&once, &old), &once);
        for (&before, &after) in labels.iter().zip(once.labels()) {
            prop_assert_eq!(after, if old.contains(&before) { 0 } else { before });
        }
    }

    #[test]
    fn confusion_merge_commutes_and_counts_ground_truth(
        a in vec((0u8..5, 0u8..5), 1..40),
        b in vec((0u8..5, 0u8..5), 1..40),
    ) {
        let acc = |pairs: &[(u8, u8)]| {
            let (p, t): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
            let mut acc = ConfusionAccumulator::new(5);
            acc.update_default(&p, &t).unwrap();
            acc
        };
        let mut ab = acc(&a);
        ab.merge(&acc(&b)).unwrap();
        let mut ba = acc(&b);
        ba.merge(&acc(&a)).unwrap();
        prop_assert_eq!(&ab, &ba);
        for c in 0..5u8 {
            let gt = a.iter().chain(&b).filter(|&&(_, t)| t == c).count() as u64;
            prop_assert_eq!(ab.tp()[c as usize] + ab.fn_()[c as usize], gt);
        }
    }

    #[test]
    fn harmonic_mean_lies_between_min_and_mean(a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
        let h = harmonic_mean(a, b);
        prop_assert!(h >= a.min(b) * (1.0 - 1e-12));
        prop_assert!(h <= 0.5 * (a + b) * (1.0 + 1e-12));
        prop_assert_eq!(harmonic_mean(a, b), harmonic_mean(b, a));
        prop_assert_eq!(harmonic_mean(0.0, b), 0.0);
    }

    #[test]
    fn poly_schedule_never_increases(max_iter in 1usize..500, lr in 1e-5f64..1.0) {
        let mut prev = f64::INFINITY;
        for it in 0..=max_iter {
            let v = poly_lr(it, max_iter, lr).unwrap();
            prop_assert!(v <= prev && v >= 0.0);
            prev = v;
        }
        prop_assert_eq!(prev, 0.0);
    }

    #[test]
    fn folds_partition_the_shape_classes(k in 1usize..6, size in 1usize..5) {
        let n = 1 + k * size;
        let split = make_folds(n, size).unwrap();
        prop_assert_eq!(split.folds.len(), k);
        let mut all: Vec<u8> = split.folds.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (1..n as u8).collect::<Vec<_>>());
        for j in 0..k {
            let base = split.base_classes(j).unwrap();
            prop_assert_eq!(base[0], 0);
            prop_assert!(split.folds[j].iter().all(|c| !base.contains(c)));
            prop_assert_eq!(base.len() + size, n);
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), classes in 1usize..6, tau in 1.0f64..20.0) {
        let cfg = ModelConfig { channels: vec![3, 4, 5], tau, ..ModelConfig::default() };
        let model = SegModel::new(&cfg, (0..classes as u8).collect(), &mut rng_for(seed, &[]));
        let entries = model_tensors(&model);
        let bytes = encode_tensors(&entries);
        let decoded = decode_tensors(&bytes).unwrap();
        prop_assert_eq!(&decoded, &entries);
        let back = model_from_tensors(decoded).unwrap();
        prop_assert_eq!(model_tensors(&back), entries);
    }
}
