//! CRPO rejects more likely candidates than RS-DPO does.

mod common;

use crpo::toylab::rejected_logprob_contrast;
use crpo::{Method, SelectionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

/// One-sided sign test p-value for `wins` successes out of `n`.
fn sign_test(wins: u64, n: u64) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    1.0 - Binomial::new(0.5, n).unwrap().cdf(wins - 1)
}

#[test]
fn independent_rewards_and_likelihoods() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let sets: Vec<_> = (0..200)
        .map(|_| {
            let k = rng.random_range(4..=16);
            let r: Vec<f64> = (0..k).map(|_| rng.random()).collect();
            let lp: Vec<f64> = (0..k).map(|_| -60.0 * rng.random::<f64>()).collect();
            let perm: Vec<usize> = (0..k).collect();
            common::build_set("en-de", &r, &lp, &perm)
        })
        .collect();
    let contrast = rejected_logprob_contrast(
        &sets,
        &SelectionConfig::for_method(Method::CrPlus),
        &SelectionConfig::for_method(Method::RsDpo),
    )
    .unwrap();
    let n = contrast.len() as u64;
    let wins = contrast.iter().filter(|(a, b)| a > b).count() as u64;
    assert!(n >= 50, "only {n} comparable sets");
    let p = sign_test(wins, n);
    assert!(p < 0.05, "{wins}/{n}, p = {p}");
}

#[test]
fn sign_test_reference_values() {
    // 2^-10 for a clean sweep of ten
    assert!((sign_test(10, 10) - 1.0 / 1024.0).abs() < 1e-15);
    assert!((sign_test(0, 10) - 1.0).abs() < 1e-15);
    // P(X >= 9) = 11/1024
    assert!((sign_test(9, 10) - 11.0 / 1024.0).abs() < 1e-12);
}
