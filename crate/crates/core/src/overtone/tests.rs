use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::grad_check;

fn random_logits(rng: &mut ChaCha8Rng, m: usize, v: usize) -> Array {
    Array::new(vec![m, v], (0..m * v).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
}

/// Brute-force softmax/log with no shared code path.
fn naive_log_prob(row: &[f64], k: usize) -> f64 {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    (row[k].exp() / z).ln()
}

fn support(p: &[f64]) -> Vec<usize> {
    p.iter().enumerate().filter(|(_, &x)| x > 0.0).map(|(i, _)| i).collect()
}

#[test]
fn ce_of_near_delta_logits() {
    let mut g = Graph::new();
    let z = g.param(Array::from_rows(&[vec![0.0, 0.0, 20.0, 0.0, 0.0]]).unwrap());
    let (loss, _) = ce_loss(&mut g, z, &[2]).unwrap();
    assert!(g.value(loss).item().unwrap() < 1e-8);
}

#[test]
fn ce_of_uniform_logits() {
    let mut g = Graph::new();
    let z = g.param(Array::zeros(&[1, 4]));
    let (loss, _) = ce_loss(&mut g, z, &[1]).unwrap();
    assert!((g.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    assert!((4f64.ln() - 1.3863).abs() < 1e-4);
}

#[test]
fn ce_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = random_logits(&mut rng, 3, 7);
    let gold = [4, 0, 6];
    let mut g = Graph::new();
    let z = g.param(logits.clone());
    let (loss, lps) = ce_loss(&mut g, z, &gold).unwrap();
    let expected: f64 = (0..3).map(|i| -naive_log_prob(logits.row(i), gold[i])).sum();
    assert!((g.value(loss).item().unwrap() - expected).abs() < 1e-12);
    for i in 0..3 {
        assert!((lps[i] - naive_log_prob(logits.row(i), gold[i])).abs() < 1e-12);
    }
}

#[test]
fn ce_rejects_bad_gold() {
    let mut g = Graph::new();
    let z = g.param(Array::zeros(&[2, 4]));
    assert!(ce_loss(&mut g, z, &[1]).is_err());
    assert!(matches!(
        ce_loss(&mut g, z, &[1, 4]),
        Err(Error::TokenOutOfRange { id: 4, .. })
    ));
}

#[test]
fn filter_hand_example() {
    let row = [3.0, 1.0, 0.0, -2.0];
    // mean 0.5, population σ = sqrt(3.25) ≈ 1.803, threshold ≈ 1.197
    let sigma = 3.25f64.sqrt();
    assert!((sigma - 1.803).abs() < 1e-3);
    assert!((3.0 - sigma - 1.197).abs() < 1e-3);
    assert_eq!(top_n_sigma_filter(&row, 1.0).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn filter_of_constant_row_is_uniform() {
    let p = top_n_sigma_filter(&[2.5, 2.5, 2.5], 0.5).unwrap();
    for x in p {
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn infinite_width_is_plain_softmax() {
    let row = [0.3, -1.0, 2.0, 0.7, -0.2];
    let p = top_n_sigma_filter(&row, f64::INFINITY).unwrap();
    let q = kernels::softmax(&row);
    for (a, b) in p.iter().zip(&q) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn filter_rejects_bad_inputs() {
    assert!(top_n_sigma_filter(&[1.0, f64::NAN], 1.0).is_err());
    assert!(top_n_sigma_filter(&[1.0, 2.0], 0.0).is_err());
    assert!(top_n_sigma_filter(&[], 1.0).is_err());
}

#[test]
fn argmax_survives_at_threshold() {
    // σ of [1, 0] is 0.5; n = 2 puts the threshold exactly on the runner-up
    // and a token sitting on the threshold is dropped.
    let p = top_n_sigma_filter(&[1.0, 0.0], 2.0).unwrap();
    assert_eq!(p, vec![1.0, 0.0]);
}

#[test]
fn mixture_branch_example() {
    let t = build_target(&[0.9, 0.1], 0, 0.1, true);
    assert_eq!(t.branch, Branch::Mixture);
    assert!((t.probs[0] - 0.91).abs() < 1e-12);
    assert!((t.probs[1] - 0.09).abs() < 1e-12);
}

#[test]
fn conflicting_prior_takes_delta_branch() {
    // old token holds 0.8, gold holds 0.2: candidate gold mass 0.28 < 0.72
    let t = build_target(&[0.8, 0.2], 1, 0.1, true);
    assert_eq!(t.branch, Branch::Delta);
    assert_eq!(t.probs, vec![0.0, 1.0]);
    // without the skip check the mixture is kept as is
    let t = build_target(&[0.8, 0.2], 1, 0.1, false);
    assert_eq!(t.branch, Branch::Mixture);
    assert!((t.probs[1] - 0.28).abs() < 1e-12);
}

#[test]
fn lambda_one_is_delta() {
    let t = build_target(&[0.5, 0.3, 0.2], 2, 1.0, true);
    assert_eq!(t.branch, Branch::Mixture);
    assert_eq!(t.probs, vec![0.0, 0.0, 1.0]);
}

#[test]
fn tie_with_gold_counts_as_success() {
    let t = build_target(&[0.5, 0.5], 1, 0.0, true);
    assert_eq!(t.branch, Branch::Mixture);
}

#[test]
fn kl_to_own_prediction_is_clipped() {
    let logits = Array::from_rows(&[vec![0.4, -0.3, 1.2, 0.0]]).unwrap();
    let p = kernels::softmax(logits.row(0));
    let target = TargetDistribution {
        probs: p,
        branch: Branch::Mixture,
        gold: 2,
    };
    let mut g = Graph::new();
    let z = g.param(logits);
    let (terms, recs) = token_kl_clipped(&mut g, z, &[target], 0.05, true).unwrap();
    assert!(recs[0].kl.abs() < 1e-12);
    assert!(recs[0].clipped);
    let loss = g.sum(terms);
    assert_eq!(g.value(loss).item().unwrap(), 0.05);
    g.backward(loss).unwrap();
    assert!(g.grad(z).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn kl_to_delta_is_ce() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = random_logits(&mut rng, 1, 6);
    let mut probs = vec![0.0; 6];
    probs[3] = 1.0;
    let target = TargetDistribution {
        probs,
        branch: Branch::Delta,
        gold: 3,
    };
    let mut g = Graph::new();
    let z = g.param(logits.clone());
    let (terms, recs) = token_kl_clipped(&mut g, z, &[target], 0.0, true).unwrap();
    let expected = -naive_log_prob(logits.row(0), 3);
    assert!((g.value(terms).data()[0] - expected).abs() < 1e-12);
    assert!((recs[0].ce_equivalent - expected).abs() < 1e-12);
}

/// KL computed independently: λ·CE[δ‖π] + (1-λ)·CE[π_flt‖π] - H(π_tar).
fn decomposed_kl(logits: &[f64], pi_flt: &[f64], gold: usize, lambda: f64, target: &[f64]) -> f64 {
    let v = logits.len();
    let ce_delta = -naive_log_prob(logits, gold);
    let ce_flt: f64 = (0..v)
        .filter(|&y| pi_flt[y] > 0.0)
        .map(|y| -pi_flt[y] * naive_log_prob(logits, y))
        .sum();
    let entropy: f64 = target.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    lambda * ce_delta + (1.0 - lambda) * ce_flt - entropy
}

#[test]
fn mixture_kl_decomposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for _ in 0..200 {
        let logits = random_logits(&mut rng, 1, 6);
        let row = logits.row(0).to_vec();
        let pi_flt = top_n_sigma_filter(&row, 0.5).unwrap();
        let gold = kernels::argmax(&pi_flt);
        let lambda = rng.gen_range(0.0..1.0);
        let target = build_target(&pi_flt, gold, lambda, true);
        assert_eq!(target.branch, Branch::Mixture);
        let kl = token_kl(&target, &row);
        let rhs = decomposed_kl(&row, &pi_flt, gold, lambda, &target.probs);
        assert!((kl - rhs).abs() < 1e-9, "{kl} vs {rhs}");
        checked += 1;
    }
    assert_eq!(checked, 200);
}

#[test]
fn reduces_to_ce_at_lambda_one_epsilon_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let m = rng.gen_range(1..6);
        let v = rng.gen_range(2..40);
        let logits = random_logits(&mut rng, m, v);
        let gold: Vec<usize> = (0..m).map(|_| rng.gen_range(0..v)).collect();

        let mut g1 = Graph::new();
        let z1 = g1.param(logits.clone());
        let (l1, _) = ce_loss(&mut g1, z1, &gold).unwrap();
        g1.backward(l1).unwrap();

        let mut g2 = Graph::new();
        let z2 = g2.param(logits.clone());
        let (l2, _) = overtone_loss(&mut g2, z2, &gold, &LossConfig::ce_equivalent(), FilterSource::Current).unwrap();
        g2.backward(l2).unwrap();

        let (a, b) = (g1.value(l1).item().unwrap(), g2.value(l2).item().unwrap());
        assert!((a - b).abs() < 1e-9);
        for (x, y) in g1.grad(z1).unwrap().data().iter().zip(g2.grad(z2).unwrap().data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn fully_clipped_loss_is_m_epsilon_with_zero_gradient() {
    // logits strongly favour gold, so the λ = 0.1 mixture sits close to π_θ
    let logits = Array::from_rows(&[vec![12.0, 0.0, 0.0], vec![0.0, 0.0, 12.0]]).unwrap();
    let cfg = LossConfig {
        epsilon: 0.05,
        ..LossConfig::lora_defaults()
    };
    let mut g = Graph::new();
    let z = g.param(logits);
    let (loss, recs) = overtone_loss(&mut g, z, &[0, 2], &cfg, FilterSource::Current).unwrap();
    assert!(recs.iter().all(|r| r.clipped));
    assert!((g.value(loss).item().unwrap() - 2.0 * 0.05).abs() < 1e-15);
    g.backward(loss).unwrap();
    assert!(g.grad(z).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn clipped_position_does_not_affect_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random_logits(&mut rng, 2, 5);
    let own = kernels::softmax(logits.row(0));
    let unclipped = build_target(&kernels::softmax(logits.row(1)), 4, 0.3, false);
    let grads = |first: TargetDistribution| {
        let mut g = Graph::new();
        let z = g.param(logits.clone());
        let (terms, recs) = token_kl_clipped(&mut g, z, &[first, unclipped.clone()], 0.2, true).unwrap();
        assert!(recs[0].clipped);
        let loss = g.sum(terms);
        g.backward(loss).unwrap();
        g.grad(z).unwrap().clone()
    };
    let base = grads(TargetDistribution { probs: own.clone(), branch: Branch::Mixture, gold: 0 });
    // nudge the first target while keeping its KL under ε
    let mut nudged = own.clone();
    nudged[0] += 0.01;
    nudged[1] -= 0.01;
    let moved = grads(TargetDistribution { probs: nudged, branch: Branch::Mixture, gold: 0 });
    assert_eq!(base, moved);
}

#[test]
fn frozen_targets_need_logits() {
    let cfg = LossConfig {
        dynamic_target: false,
        ..LossConfig::lora_defaults()
    };
    let mut g = Graph::new();
    let z = g.param(Array::zeros(&[2, 3]));
    assert!(matches!(
        overtone_loss(&mut g, z, &[0, 1], &cfg, FilterSource::Current),
        Err(Error::Missing(_))
    ));
    let frozen = Array::from_rows(&[vec![5.0, 0.0, 0.0], vec![0.0, 5.0, 0.0]]).unwrap();
    let (_, recs) = overtone_loss(&mut g, z, &[0, 1], &cfg, FilterSource::Frozen(&frozen)).unwrap();
    assert!(recs.iter().all(|r| r.branch == Branch::Mixture));
}

#[test]
fn overtone_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = random_logits(&mut rng, 4, 9);
    let gold = [1, 7, 3, 0];
    // frozen targets so that the function itself is smooth under perturbation
    let frozen = random_logits(&mut rng, 4, 9);
    let cfg = LossConfig {
        epsilon: 0.0,
        dynamic_target: false,
        ..LossConfig::lora_defaults()
    };
    let report = grad_check(
        |g, ids| {
            let (loss, _) = overtone_loss(g, ids[0], &gold, &cfg, FilterSource::Frozen(&frozen))
                .map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
            Ok(loss)
        },
        &[logits],
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.passed(1e-5), "{report:?}");
}

#[test]
fn published_defaults() {
    let lora = LossConfig::lora_defaults();
    assert_eq!((lora.epsilon, lora.n_sigma, lora.lambda), (0.05, 0.5, 0.1));
    let ftm = LossConfig::ftm_defaults();
    assert_eq!((ftm.epsilon, ftm.n_sigma, ftm.lambda), (0.01, 0.5, 0.1));
    assert!(lora.dynamic_target && lora.skip_enabled && lora.filter_enabled && lora.clip_enabled);
    lora.validate().unwrap();
}

#[test]
fn config_json_keys() {
    let json = serde_json::to_value(LossConfig::lora_defaults()).unwrap();
    let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(
        keys,
        ["clip_enabled", "dynamic_target", "epsilon", "filter_enabled", "lambda", "n_sigma", "skip_enabled"]
    );
    let bad = LossConfig { lambda: 1.5, ..LossConfig::lora_defaults() };
    assert!(bad.validate().is_err());
}

proptest! {
    #[test]
    fn filter_support_grows_with_width(
        row in prop::collection::vec(-5.0f64..5.0, 2..40),
        n1 in 0.05f64..3.0,
        dn in 0.0f64..3.0,
    ) {
        let n2 = n1 + dn;
        let small = support(&top_n_sigma_filter(&row, n1).unwrap());
        let large = support(&top_n_sigma_filter(&row, n2).unwrap());
        prop_assert!(small.iter().all(|i| large.contains(i)));
    }

    #[test]
    fn filter_is_normalized_and_keeps_argmax(
        row in prop::collection::vec(-5.0f64..5.0, 1..40),
        n in 0.05f64..4.0,
    ) {
        let p = top_n_sigma_filter(&row, n).unwrap();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(p[kernels::argmax(&row)] > 0.0);
    }

    #[test]
    fn targets_are_valid(
        row in prop::collection::vec(-5.0f64..5.0, 2..30),
        gold_frac in 0.0f64..1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let gold = ((row.len() as f64 * gold_frac) as usize).min(row.len() - 1);
        let flt = top_n_sigma_filter(&row, 0.5).unwrap();
        let t = build_target(&flt, gold, lambda, true);
        let total: f64 = t.probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        let max = t.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(t.probs[gold] >= max);
        if t.branch == Branch::Delta {
            prop_assert_eq!(t.probs[gold], 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn mixture_kl_decomposes_at_random_rows(
        row in prop::collection::vec(-4.0f64..4.0, 2..20),
        lambda in 0.0f64..1.0,
    ) {
        let pi_flt = top_n_sigma_filter(&row, 0.5).unwrap();
        let gold = kernels::argmax(&pi_flt);
        let target = build_target(&pi_flt, gold, lambda, true);
        let kl = token_kl(&target, &row);
        let rhs = decomposed_kl(&row, &pi_flt, gold, lambda, &target.probs);
        prop_assert!((kl - rhs).abs() < 1e-9, "{} vs {}", kl, rhs);
    }

    #[test]
    fn ce_endpoint_matches_ce_loss_and_gradient(seed in 0u64..10_000, m in 1usize..6, v in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_logits(&mut rng, m, v);
        let gold: Vec<usize> = (0..m).map(|_| rng.gen_range(0..v)).collect();
        let mut g1 = Graph::new();
        let z1 = g1.param(logits.clone());
        let (l1, _) = ce_loss(&mut g1, z1, &gold).unwrap();
        g1.backward(l1).unwrap();
        let mut g2 = Graph::new();
        let z2 = g2.param(logits);
        let (l2, _) = overtone_loss(&mut g2, z2, &gold, &LossConfig::ce_equivalent(), FilterSource::Current).unwrap();
        g2.backward(l2).unwrap();
        prop_assert!((g1.value(l1).item().unwrap() - g2.value(l2).item().unwrap()).abs() < 1e-9);
        for (x, y) in g1.grad(z1).unwrap().data().iter().zip(g2.grad(z2).unwrap().data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn clipped_rows_get_no_gradient(seed in 0u64..10_000, m in 2usize..6, v in 2usize..12, epsilon in 0.0f64..1.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_logits(&mut rng, m, v);
        let gold: Vec<usize> = (0..m).map(|_| rng.gen_range(0..v)).collect();
        let cfg = LossConfig { epsilon, ..LossConfig::lora_defaults() };
        let mut g = Graph::new();
        let z = g.param(logits.clone());
        let (loss, recs) = overtone_loss(&mut g, z, &gold, &cfg, FilterSource::Current).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(z).unwrap().clone();
        let kept: Vec<usize> = (0..m).filter(|&i| !recs[i].clipped).collect();
        for i in (0..m).filter(|i| !kept.contains(i)) {
            prop_assert!(grad.row(i).iter().all(|&x| x == 0.0));
        }
        // the unclipped rows alone give the same gradient on those rows
        if !kept.is_empty() {
            let rows: Vec<Vec<f64>> = kept.iter().map(|&i| logits.row(i).to_vec()).collect();
            let sub_gold: Vec<usize> = kept.iter().map(|&i| gold[i]).collect();
            let mut h = Graph::new();
            let y = h.param(Array::from_rows(&rows).unwrap());
            let (l, _) = overtone_loss(&mut h, y, &sub_gold, &cfg, FilterSource::Current).unwrap();
            h.backward(l).unwrap();
            let sub = h.grad(y).unwrap();
            for (k, &i) in kept.iter().enumerate() {
                for (a, b) in grad.row(i).iter().zip(sub.row(k)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
