use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rial_core::imitation::{gail_reward, hybrid_reward, HybridRewardConfig, DEFAULT_GAIL_CLIP};
use rial_core::ppo::kstep_advantage;

fn cfg(lambda: f64) -> HybridRewardConfig {
    HybridRewardConfig {
        lambda,
        ..Default::default()
    }
}

#[test]
fn gail_reward_is_bounded_and_clips_near_one() {
    for i in 0..=10_000 {
        let p = i as f64 / 10_000.0;
        let r = gail_reward(p, DEFAULT_GAIL_CLIP).unwrap();
        assert!((0.0..=10.0).contains(&r), "p={p} r={r}");
    }
    assert_eq!(gail_reward(0.0, 10.0).unwrap(), 0.0);
    assert_eq!(gail_reward(1.0, 10.0).unwrap(), 10.0);
    // -ln(1 - p) passes 10 near p = 1 - e^-10
    assert_eq!(gail_reward(1.0 - 1e-6, 10.0).unwrap(), 10.0);
    let below = 1.0 - (-9.0f64).exp();
    assert!((gail_reward(below, 10.0).unwrap() - 9.0).abs() < 1e-9);
    assert!((gail_reward(0.5, 10.0).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!(gail_reward(1.5, 10.0).is_err());
    assert!(gail_reward(f64::NAN, 10.0).is_err());
}

#[test]
fn endpoints_reduce_to_single_reward() {
    for (g, t) in [(0.3, 1.0), (10.0, 0.125), (0.0, 0.0), (7.25, 2.0)] {
        assert_eq!(hybrid_reward(&cfg(0.0), g, t), t);
        assert_eq!(hybrid_reward(&cfg(1.0), g, t), g);
    }
}

proptest! {
    #[test]
    fn hybrid_is_affine_in_lambda(l1 in 0.0..=1.0f64, l2 in 0.0..=1.0f64, g in 0.0..10.0f64, t in 0.0..2.0f64, w in 0.0..=1.0f64) {
        let mix = w * l1 + (1.0 - w) * l2;
        let lhs = hybrid_reward(&cfg(mix), g, t);
        let rhs = w * hybrid_reward(&cfg(l1), g, t) + (1.0 - w) * hybrid_reward(&cfg(l2), g, t);
        prop_assert!((lhs - rhs).abs() < 1e-12);
        let lo = g.min(t) - 1e-12;
        let hi = g.max(t) + 1e-12;
        prop_assert!(lo <= lhs && lhs <= hi);
    }
}

/// Direct evaluation of the windowed discounted sum at every step.
fn oracle(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, k: usize) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let end = (t + k).min(n);
            let mut g: f64 = (t..end).map(|i| gamma.powi((i - t) as i32) * rewards[i]).sum();
            let tail = if end < n { values[end] } else { bootstrap };
            g += gamma.powi((end - t) as i32) * tail;
            g - values[t]
        })
        .collect()
}

#[test]
fn kstep_advantage_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let n = rng.random_range(1..120);
        let k = rng.random_range(1..70);
        let gamma = rng.random_range(0.5..=1.0);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..11.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let boot = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(-50.0..50.0) };
        let (adv, targets) = kstep_advantage(&rewards, &values, boot, gamma, k, false).unwrap();
        let want = oracle(&rewards, &values, boot, gamma, k);
        for t in 0..n {
            assert!((adv[t] - want[t]).abs() < 1e-6, "t={t} n={n} k={k}: {} vs {}", adv[t], want[t]);
            assert!((targets[t] - (want[t] + values[t])).abs() < 1e-6);
        }
    }
}

#[test]
fn exact_values_give_zero_advantage_on_a_chain() {
    // five-state chain walked left to right, reward 1 on entering the last state
    let gamma = 0.9f64;
    let rewards = [0.0, 0.0, 0.0, 1.0];
    let values: Vec<f64> = (0..4).map(|t| gamma.powi(3 - t as i32)).collect();
    for k in 1..=6 {
        let (adv, targets) = kstep_advantage(&rewards, &values, 0.0, gamma, k, false).unwrap();
        for (a, (tg, v)) in adv.iter().zip(targets.iter().zip(&values)) {
            assert!(a.abs() < 1e-12, "k={k}: {adv:?}");
            assert!((tg - v).abs() < 1e-12);
        }
    }
    // with zero value estimates the K >= T window is the Monte Carlo return
    let (adv, _) = kstep_advantage(&rewards, &[0.0; 4], 0.0, gamma, 4, false).unwrap();
    for (t, a) in adv.iter().enumerate() {
        assert!((a - values[t]).abs() < 1e-12);
    }
}

#[test]
fn printed_bootstrap_uses_one_less_power() {
    let (a, _) = kstep_advantage(&[0.0, 0.0], &[0.0, 0.0], 1.0, 0.5, 2, true).unwrap();
    let (b, _) = kstep_advantage(&[0.0, 0.0], &[0.0, 0.0], 1.0, 0.5, 2, false).unwrap();
    assert_eq!(a[0], 0.5);
    assert_eq!(b[0], 0.25);
}
