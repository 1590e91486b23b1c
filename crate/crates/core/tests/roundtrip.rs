//! Emitted files re-ingest without loss.

use std::collections::BTreeMap;

use crpo::io::{
    read_candidates, read_pairs, write_candidates, write_pairs, CandidateFile, FileHeader,
};
use crpo::{Candidate, CandidateSet, Direction, Method, PreferencePair};
use proptest::prelude::*;

fn candidate() -> impl Strategy<Value = Candidate> {
    (
        "[a-z0-9]{1,6}",
        "\\PC{0,12}",
        prop::option::of(prop_oneof![
            Just(-0.0),
            -1e6f64..=0.0,
            Just(-f64::MIN_POSITIVE)
        ]),
        prop::collection::btree_map(
            "[a-z]{1,4}",
            prop_oneof![0.0f64..=1.0, Just(1.0), Just(1e-300)],
            1..4,
        ),
        prop::option::of(1u32..500),
    )
        .prop_map(|(id, text, lp, rewards, tokens)| {
            let c = Candidate::new(id, text, lp, rewards).unwrap();
            match tokens {
                Some(t) => c.with_token_count(t),
                None => c,
            }
        })
}

fn candidate_set(idx: usize) -> impl Strategy<Value = CandidateSet> {
    (
        prop::collection::vec(candidate(), 1..6),
        "\\PC{0,10}",
        prop::bool::ANY,
    )
        .prop_map(move |(cands, text, into_en)| {
            let mut seen = std::collections::HashSet::new();
            let cands: Vec<Candidate> = cands
                .into_iter()
                .filter(|c| seen.insert(c.id().to_string()))
                .collect();
            let dir = if into_en {
                Direction::new("zh", "en")
            } else {
                Direction::new("en", "cs")
            };
            CandidateSet::new(format!("s{idx}"), text, dir, cands).unwrap()
        })
}

proptest! {
    #[test]
    fn candidate_files_round_trip(
        sets in (0usize..5).prop_flat_map(|n| (0..n).map(candidate_set).collect::<Vec<_>>()),
        policy in prop::option::of("[a-z-]{1,10}"),
    ) {
        let file = CandidateFile {
            header: policy.map(|p| FileHeader { reference_policy: Some(p), note: None }),
            sets,
        };
        let mut buf = Vec::new();
        write_candidates(&file, &mut buf).unwrap();
        let back = read_candidates(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &file);
        for (a, b) in back.sets.iter().flat_map(|s| s.candidates()).zip(file.sets.iter().flat_map(|s| s.candidates())) {
            prop_assert_eq!(a.logprob_opt().map(f64::to_bits), b.logprob_opt().map(f64::to_bits));
        }
    }

    #[test]
    fn pair_files_round_trip(scores in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..20)) {
        let pairs: Vec<PreferencePair> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| PreferencePair {
                source_id: format!("s{i}"),
                chosen_id: "a".into(),
                rejected_id: "b".into(),
                method: Method::ALL[i % Method::ALL.len()],
                score: s,
                extras: BTreeMap::from([("x".to_string(), s / 3.0)]),
            })
            .collect();
        let mut buf = Vec::new();
        write_pairs(&pairs, &mut buf).unwrap();
        let back = read_pairs(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), pairs.len());
        for (a, b) in back.iter().zip(&pairs) {
            prop_assert_eq!(a.score.to_bits(), b.score.to_bits());
            prop_assert_eq!(a, b);
        }
    }
}
