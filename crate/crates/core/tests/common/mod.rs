#![allow(dead_code)]

use crpo::{Candidate, CandidateSet, Direction};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Rewards and log-probabilities on a coarse grid half of the time, so ties
/// are common.
pub fn reward_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![(0u32..=10).prop_map(|x| f64::from(x) / 10.0), 0.0f64..=1.0]
}

pub fn logprob_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![
        (0u32..=12).prop_map(|x| -5.0 * f64::from(x)),
        -60.0f64..=0.0
    ]
}

/// Candidate ids are assigned in a shuffled order so that id order and
/// storage order differ.
pub fn build_set(
    direction: &str,
    rewards: &[f64],
    logprobs: &[f64],
    perm: &[usize],
) -> CandidateSet {
    let candidates = rewards
        .iter()
        .zip(logprobs)
        .zip(perm)
        .map(|((&r, &lp), &p)| Candidate::scored(format!("c{p:02}"), r, lp).unwrap())
        .collect();
    CandidateSet::new(
        "src",
        "text",
        direction.parse::<Direction>().unwrap(),
        candidates,
    )
    .unwrap()
}

pub fn set_strategy(k: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = CandidateSet> {
    k.prop_flat_map(|k| {
        (
            prop::collection::vec(reward_strategy(), k),
            prop::collection::vec(logprob_strategy(), k),
            Just((0..k).collect::<Vec<_>>()).prop_shuffle(),
            prop::bool::ANY,
        )
    })
    .prop_map(|(r, lp, perm, into_en)| {
        build_set(if into_en { "de-en" } else { "en-de" }, &r, &lp, &perm)
    })
}

/// Same distribution as [`set_strategy`], driven by a plain RNG for loops
/// that need an exact instance count.
pub fn random_set<R: Rng>(rng: &mut R, k: usize) -> CandidateSet {
    let grid = |rng: &mut R| rng.random_bool(0.5);
    let rewards: Vec<f64> = (0..k)
        .map(|_| {
            if grid(rng) {
                f64::from(rng.random_range(0..=10u32)) / 10.0
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    let logprobs: Vec<f64> = (0..k)
        .map(|_| {
            if grid(rng) {
                -5.0 * f64::from(rng.random_range(0..=12u32))
            } else {
                -60.0 * rng.random::<f64>()
            }
        })
        .collect();
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(rng);
    build_set(
        if rng.random_bool(0.5) {
            "de-en"
        } else {
            "en-de"
        },
        &rewards,
        &logprobs,
        &perm,
    )
}

/// Reference CRPO: score every admissible (best, j) pair, keep the largest
/// positive score, ties to the lowest rejected id. Returns (chosen, rejected,
/// score) ids.
pub fn brute_force_crpo(
    set: &CandidateSet,
    multiplicative: bool,
    k_trust: f64,
    gate: crpo::GateMode,
    epsilon: f64,
) -> Option<(String, String, f64)> {
    use crpo::GateMode;
    let c = set.candidates();
    let mut best = &c[0];
    for cand in c {
        let (r, rb) = (cand.reward().unwrap(), best.reward().unwrap());
        if r > rb || (r == rb && cand.id() < best.id()) {
            best = cand;
        }
    }
    let (rw, lw) = (best.reward().unwrap(), best.logprob().unwrap());
    let mut scored: Vec<(f64, &str)> = c
        .iter()
        .filter(|j| j.id() != best.id())
        .filter(|j| {
            let lj = j.logprob().unwrap();
            match gate {
                GateMode::Off => true,
                GateMode::LogSpace => lj - lw + epsilon > 0.0,
                GateMode::Probability => lj.exp() - lw.exp() + epsilon > 0.0,
            }
        })
        .map(|j| {
            let (dr, dl) = (rw - j.reward().unwrap(), j.logprob().unwrap() - lw);
            (
                if multiplicative {
                    dr * dl
                } else {
                    k_trust * dr + dl
                },
                j.id(),
            )
        })
        .filter(|(s, _)| *s > 0.0)
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    scored
        .first()
        .map(|(s, id)| (best.id().to_string(), id.to_string(), *s))
}
