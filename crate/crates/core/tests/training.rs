mod common;

use common::*;
use dac_core::adapter::Adapter;
use dac_core::bundle::SplitTag;
use dac_core::cache::{build_text_cache, build_visual_cache};
use dac_core::linalg::{l2_normalize, Mat};
use dac_core::objective::{contrastive_grad, contrastive_loss, contrastive_loss_and_grad, PairBatch};
use dac_core::synthetic::{generate, SyntheticConfig};
use dac_core::train::{
    train_visual_adapter, train_visual_adapter_xent, BatchPolicy, TrainConfig, TrainingSet, VisualTrainer,
};
use proptest::prelude::*;

fn batch(r: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize) -> PairBatch {
    PairBatch {
        first: (0..n).map(|_| unit_vec(r, d)).collect(),
        second: (0..n).map(|_| unit_vec(r, d)).collect(),
    }
}

#[test]
fn gradient_small_instance() {
    let mut r = rng(71);
    let (n, d) = (3, 5);
    for tau in [0.5, 0.07] {
        let theta = random_theta(&mut r, d, 0.3);
        let b = batch(&mut r, n, d);
        let g = contrastive_grad(&Adapter::from_layers(vec![theta.clone()], 0).unwrap(), &b, tau).unwrap();
        let fd = fd_grad(&theta, 1e-5, |t| naive_contrastive(t, &b.first, &b.second, tau));
        for (a, f) in g[0].data().iter().zip(&fd) {
            assert!((a - f).abs() / (1.0 + f.abs()) <= 1e-5, "tau {tau}: {a} vs {f}");
        }
    }
}

#[test]
fn gradient_at_training_temperature() {
    // tightly clustered views keep score gaps on the order of tau, so the
    // softmax is not saturated and the gradient is far from zero
    let mut r = rng(72);
    let (n, d, tau) = (3, 5, 0.008);
    let centre = unit_vec(&mut r, d);
    let near = |r: &mut rand_chacha::ChaCha8Rng| {
        let noise = raw_vec(r, d);
        naive_normalize(&centre.iter().zip(&noise).map(|(c, e)| c + 0.05 * e).collect::<Vec<_>>())
    };
    let b = PairBatch {
        first: (0..n).map(|_| near(&mut r)).collect(),
        second: (0..n).map(|_| near(&mut r)).collect(),
    };
    let theta = random_theta(&mut r, d, 0.05);
    let g = contrastive_grad(&Adapter::from_layers(vec![theta.clone()], 0).unwrap(), &b, tau).unwrap();
    let fd = fd_grad(&theta, 1e-5, |t| naive_contrastive(t, &b.first, &b.second, tau));
    assert!(fd.iter().map(|x| x * x).sum::<f64>().sqrt() > 0.1);
    for (a, f) in g[0].data().iter().zip(&fd) {
        assert!((a - f).abs() / (1.0 + f.abs()) <= 1e-5, "{a} vs {f}");
    }
    assert!(rel_err(g[0].data(), &fd, 1e-12) <= 1e-6);
}

#[test]
fn deeper_adapter_gradient() {
    let mut r = rng(73);
    let d = 4;
    let layers: Vec<Mat> = (0..2).map(|_| random_theta(&mut r, d, 0.2)).collect();
    let adapter = Adapter::from_layers(layers.clone(), 0).unwrap();
    // positive inputs keep the ReLUs in their active region
    let pos = |r: &mut rand_chacha::ChaCha8Rng| {
        l2_normalize(&raw_vec(r, d).iter().map(|x| x.abs() + 0.1).collect::<Vec<_>>()).unwrap()
    };
    let b = PairBatch {
        first: (0..3).map(|_| pos(&mut r)).collect(),
        second: (0..3).map(|_| pos(&mut r)).collect(),
    };
    let (_, g) = contrastive_loss_and_grad(&adapter, &b, 0.2).unwrap();
    for l in 0..2 {
        let fd = fd_grad(&layers[l], 1e-6, |m| {
            let mut ls = layers.clone();
            ls[l] = m.clone();
            contrastive_loss(&Adapter::from_layers(ls, 0).unwrap(), &b, 0.2).unwrap()
        });
        assert!(rel_err(g[l].data(), &fd, 1e-12) <= 1e-5, "layer {l}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Full-batch epoch objective: its first Adam step must equal the step
    /// implied by a finite-difference gradient of the summed pair losses.
    #[test]
    fn full_batch_epoch_gradient(
        seed in 0u64..10_000,
        n in 2usize..=3,
        km_half in 1usize..=2,
        d_pick in 0usize..2,
    ) {
        let d = [4usize, 8][d_pick];
        let km = 2 * km_half;
        let mut r = rng(seed);
        let train = random_bundle(&mut r, n, km / 2, 2, d, SplitTag::Train);
        let set = TrainingSet::from_bundle(&train, 2).unwrap();
        let theta = random_theta(&mut r, d, 0.3);
        let tau = 0.2;
        let pairs = set.pairs();
        let objective = |t: &Mat| {
            let mut total = 0.0;
            for &(i, j) in &pairs {
                let first: Vec<Vec<f64>> = (0..n).map(|c| set.class_views(c)[i].clone()).collect();
                let second: Vec<Vec<f64>> = (0..n).map(|c| set.class_views(c)[j].clone()).collect();
                total += naive_contrastive(t, &first, &second, tau);
            }
            total / pairs.len() as f64
        };
        let fd = fd_grad(&theta, 1e-5, objective);

        let lr = 1e-3;
        let cfg = TrainConfig { lr, tau, views_per_shot: 2, batch_policy: BatchPolicy::FullBatch, ..Default::default() };
        let adapter = Adapter::from_layers(vec![theta.clone()], 0).unwrap();
        let mut trainer = VisualTrainer::new(adapter, &set, &cfg, None, None).unwrap();
        let log = trainer.run_epoch().unwrap();
        prop_assert!((log.mean_loss - objective(&theta)).abs() <= 1e-10 * (1.0 + log.mean_loss.abs()));
        for (idx, g) in fd.iter().enumerate() {
            // first bias-corrected Adam step is lr * g / (|g| + eps)
            let expected = theta.data()[idx] - lr * g / (g.abs() + 1e-8);
            let got = trainer.adapter().theta().data()[idx];
            // |g| near eps would make the step ill-conditioned in the FD gradient
            if g.abs() > 1e-4 {
                prop_assert!((got - expected).abs() <= 1e-9, "idx {}: {} vs {}", idx, got, expected);
            }
        }
    }

    #[test]
    fn gradient_is_orthogonal_to_radial_direction(seed in 0u64..10_000, n in 2usize..5, d in 3usize..9) {
        let mut r = rng(seed);
        let theta = random_theta(&mut r, d, 0.4);
        let b = batch(&mut r, n, d);
        let g = contrastive_grad(&Adapter::from_layers(vec![theta.clone()], 0).unwrap(), &b, 0.1).unwrap();
        let radial: f64 = g[0].data().iter().zip(theta.data()).map(|(a, t)| a * t).sum();
        let scale: f64 = g[0].data().iter().map(|x| x.abs()).sum::<f64>() + 1.0;
        prop_assert!(radial.abs() <= 1e-10 * scale);
    }

    #[test]
    fn loss_is_nonnegative_and_class_permutation_invariant(seed in 0u64..10_000, n in 1usize..6, d in 2usize..7) {
        let mut r = rng(seed);
        let theta = random_theta(&mut r, d, 0.4);
        let adapter = Adapter::from_layers(vec![theta], 0).unwrap();
        let b = batch(&mut r, n, d);
        let loss = contrastive_loss(&adapter, &b, 0.05).unwrap();
        prop_assert!(loss >= -1e-12);
        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted = PairBatch {
            first: perm.iter().map(|&i| b.first[i].clone()).collect(),
            second: perm.iter().map(|&i| b.second[i].clone()).collect(),
        };
        let other = contrastive_loss(&adapter, &permuted, 0.05).unwrap();
        prop_assert!((loss - other).abs() <= 1e-9 * (1.0 + loss));
    }
}

fn benchmark() -> (dac_core::synthetic::SyntheticData, dac_core::TextCache, dac_core::VisualCache) {
    let data = generate(&SyntheticConfig::default()).unwrap();
    let text = build_text_cache(&data.text).unwrap();
    let cache = build_visual_cache(&data.cache, 10).unwrap();
    (data, text, cache)
}

#[test]
fn default_schedule_reduces_epoch_loss() {
    let (data, text, cache) = benchmark();
    let cfg = TrainConfig { epochs: 8, views_per_shot: 2, seed: 1, ..Default::default() };
    let (adapter, log) = train_visual_adapter(&data.train, &cfg, None, &cache, &text).unwrap();
    assert_eq!(log.epochs.len(), 8);
    assert_eq!(log.epochs[0].steps, 32 * 31 / 2);
    assert!(log.epochs.last().unwrap().mean_loss < log.epochs[0].mean_loss);
    assert!(!adapter.is_identity());
    assert_eq!(adapter.epoch, 8);
}

#[test]
fn cross_entropy_variant_reduces_loss() {
    let (data, text, cache) = benchmark();
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 15,
        views_per_shot: 2,
        batch_policy: BatchPolicy::FullBatch,
        ..Default::default()
    };
    let (_, log) = train_visual_adapter_xent(&data.train, &cfg, &cache, &text).unwrap();
    assert_eq!(log.objective, dac_core::train::Objective::CrossEntropy);
    assert!(log.epochs.last().unwrap().mean_loss < log.epochs[0].mean_loss);
    assert!(log.epochs.iter().all(|e| e.pair_terms_per_class.is_empty()));
}

#[test]
fn checkpoint_selection_prefers_earliest_best() {
    let (data, text, cache) = benchmark();
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 4,
        views_per_shot: 2,
        val_every: 1,
        ..Default::default()
    };
    // with a frozen adapter every checkpoint ties, so the first one wins
    let (_, log) = train_visual_adapter(&data.train, &cfg, Some(&data.val), &cache, &text).unwrap();
    assert_eq!(log.selected_epoch, 1);
    assert!(log.epochs.iter().all(|e| e.val_top1 == log.epochs[0].val_top1));
}

#[test]
fn rejects_wrong_split_and_shapes() {
    let (data, text, cache) = benchmark();
    let cfg = TrainConfig { epochs: 1, views_per_shot: 2, ..Default::default() };
    assert!(train_visual_adapter(&data.val, &cfg, None, &cache, &text).is_err());
    let small = generate(&SyntheticConfig { dim: 8, nuisance_dims: 2, ..Default::default() }).unwrap();
    assert!(matches!(
        train_visual_adapter(&small.train, &cfg, None, &cache, &text),
        Err(dac_core::Error::DimensionMismatch(_))
    ));
    let too_many = TrainConfig { views_per_shot: 3, ..cfg.clone() };
    assert!(matches!(
        train_visual_adapter(&data.train, &too_many, None, &cache, &text),
        Err(dac_core::Error::InsufficientViews(_))
    ));
    let bad_tau = TrainConfig { tau: 0.0, ..cfg };
    assert!(matches!(
        train_visual_adapter(&data.train, &bad_tau, None, &cache, &text),
        Err(dac_core::Error::NonPositiveTemperature(_))
    ));
}
