//! Synthetic candidate pools for the selection benchmarks.

use crpo::{Candidate, CandidateSet, Direction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n_sources` pools of `k` candidates with uniform rewards and
/// log-probabilities in `[-40, 0)`.
pub fn synthetic_pools(n_sources: usize, k: usize, seed: u64) -> Vec<CandidateSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_sources)
        .map(|s| {
            let candidates = (0..k)
                .map(|j| {
                    let reward: f64 = rng.random();
                    let logprob = -40.0 * rng.random::<f64>() - 1e-3;
                    Candidate::scored(format!("c{j}"), reward, logprob)
                        .expect("valid synthetic candidate")
                })
                .collect();
            CandidateSet::new(
                format!("s{s}"),
                "src",
                Direction::new("en", "de"),
                candidates,
            )
            .expect("distinct ids")
        })
        .collect()
}
