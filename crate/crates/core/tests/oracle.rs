use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;
use trackscreen_core::synth::{generate, group_histories, oracle_flags, GeneratorSpec, InjectionSpec, OracleRule, PerfKey};
use trackscreen_core::{run_detector, DetectorConfig, MethodId};

const RULES: [(MethodId, OracleRule); 4] = [
    (MethodId::ZScore, OracleRule::Zscore),
    (MethodId::Mad, OracleRule::Mad),
    (MethodId::Iqr, OracleRule::Iqr),
    (MethodId::ExcessPerformance, OracleRule::Excess),
];

fn check(seed: u64, cfg: &DetectorConfig) -> Result<(), TestCaseError> {
    let data = generate(&GeneratorSpec {
        n_athletes: 150,
        injection: InjectionSpec { fraction_doped: 0.05, ..InjectionSpec::default() },
        seed,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let histories = group_histories(&data.performances);
    let by_id: HashMap<&str, _> = histories.iter().map(|h| (h.athlete_id.as_str(), h)).collect();
    for (method, rule) in RULES {
        let result = run_detector(method, &histories, cfg).unwrap();
        let got: BTreeSet<PerfKey> = result
            .flagged_entries()
            .map(|e| PerfKey::of(&by_id[e.performance.athlete_id.as_str()].performances[e.performance.index as usize]))
            .collect();
        prop_assert_eq!(got, oracle_flags(&data.performances, rule, cfg), "{}", method);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn stat_rules_match_exact_oracle(seed in 0u64..10_000) {
        check(seed, &DetectorConfig::default())?;
    }

    #[test]
    fn stat_rules_match_oracle_at_other_thresholds(
        seed in 0u64..10_000,
        z in 1.5f64..3.5,
        mad in 2.0f64..4.0,
        iqr in 0.5f64..3.0,
        excess in -3.0f64..-1.0,
        min_history in 3usize..6,
    ) {
        let cfg = DetectorConfig {
            z_threshold: z,
            mad_threshold: mad,
            iqr_multiplier: iqr,
            excess_threshold: excess,
            min_history,
            ..DetectorConfig::default()
        };
        check(seed, &cfg)?;
    }
}
