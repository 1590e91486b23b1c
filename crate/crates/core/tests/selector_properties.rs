mod common;

use common::{brute_force_crpo, set_strategy};
use crpo::selectors::{select, select_rsdpo, selection_rng, UtilitySource};
use crpo::types::{EXTRA_CHOSEN_MBR, EXTRA_REJECTED_MBR};
use crpo::{EtaMap, GateMode, Method, SelectionConfig};
use proptest::prelude::*;

fn gate_strategy() -> impl Strategy<Value = (GateMode, f64)> {
    (
        prop_oneof![
            Just(GateMode::Off),
            Just(GateMode::LogSpace),
            Just(GateMode::Probability)
        ],
        prop_oneof![Just(0.0), 0.0f64..20.0],
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn crpo_matches_enumeration(
        set in set_strategy(2..=16),
        mult in any::<bool>(),
        k in prop_oneof![Just(50.0), 0.1f64..100.0],
        (gate, epsilon) in gate_strategy(),
    ) {
        let config = SelectionConfig {
            method: if mult { Method::CrTimes } else { Method::CrPlus },
            k_trust: k,
            gate_mode: gate,
            epsilon,
            ..SelectionConfig::default()
        };
        let got = select(&set, &config, UtilitySource::Builtin, &mut selection_rng(0, 0)).unwrap();
        let want = brute_force_crpo(&set, mult, k, gate, epsilon);
        match want {
            None => {
                prop_assert!(got.pairs.is_empty());
                prop_assert!(got.skipped_reason.is_some());
            }
            Some((w, l, s)) => {
                prop_assert_eq!(got.pairs.len(), 1);
                let p = &got.pairs[0];
                prop_assert_eq!((&p.chosen_id, &p.rejected_id, p.score), (&w, &l, s));
            }
        }
    }

    #[test]
    fn every_selector_orders_pairs(set in set_strategy(3..=12), seed in any::<u64>()) {
        for method in Method::ALL {
            let config = SelectionConfig { method, seed, top_n: 3, ..SelectionConfig::default() };
            let out = select(&set, &config, UtilitySource::Builtin, &mut selection_rng(seed, 0)).unwrap();
            for p in &out.pairs {
                prop_assert_ne!(&p.chosen_id, &p.rejected_id);
                if method.is_mbr() {
                    prop_assert!(p.extras[EXTRA_CHOSEN_MBR] >= p.extras[EXTRA_REJECTED_MBR]);
                } else {
                    let r = |id: &str| set.get(id).unwrap().reward().unwrap();
                    prop_assert!(r(&p.chosen_id) >= r(&p.rejected_id), "{method}: {p:?}");
                }
            }
            if method == Method::QeBest {
                prop_assert!(out.sft_target.is_some() && out.pairs.is_empty());
            }
        }
    }

    #[test]
    fn selectors_are_deterministic(set in set_strategy(2..=10), seed in any::<u64>()) {
        for method in Method::ALL {
            let config = SelectionConfig { method, seed, top_n: 2, ..SelectionConfig::default() };
            let run = || select(&set, &config, UtilitySource::Builtin, &mut selection_rng(seed, 3));
            let (a, b) = (run(), run());
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(a), Err(b)) => prop_assert_eq!(a.to_string(), b.to_string()),
                _ => prop_assert!(false, "{method} differs between runs"),
            }
        }
    }

    #[test]
    fn rsdpo_count_non_increasing_in_eta(set in set_strategy(2..=16), etas in prop::collection::vec(0.001f64..0.999, 2..8)) {
        let mut etas = etas;
        etas.sort_by(f64::total_cmp);
        let counts: Vec<usize> = etas
            .iter()
            .map(|&eta| {
                let config = SelectionConfig {
                    method: Method::RsDpo,
                    eta: EtaMap { out_of_english: eta, into_english: eta },
                    ..SelectionConfig::default()
                };
                select_rsdpo(&set, &config).unwrap().pairs.len()
            })
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    }
}
