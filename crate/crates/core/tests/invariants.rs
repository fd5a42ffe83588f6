mod common;

use coserve::engine::run;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn accounting_holds_at_every_event(seed in any::<u64>()) {
        let cfg = common::fuzz_config(seed, 3000);
        let out = run(&cfg).map_err(|e| TestCaseError::fail(format!("{:?} {e}", cfg.policy)))?;
        let progress: u64 = out.requests.iter().map(|r| r.context_len() as u64).sum();
        prop_assert_eq!(progress, out.diagnostics.committed_tokens);
        let r = &out.report;
        prop_assert!(r.ttft_p50 <= r.ttft_p90 && r.ttft_p90 <= r.ttft_p99 && r.ttft_p99 <= r.ttft_max);
        prop_assert!(r.tbt_p50 <= r.tbt_p90 && r.tbt_p90 <= r.tbt_p99 && r.tbt_p99 <= r.tbt_max);
        prop_assert!((0.0..=1.0).contains(&r.ttft_attainment) && (0.0..=1.0).contains(&r.tbt_attainment));
        for q in &out.requests {
            if let Some(first) = q.token_completion_times.first() {
                prop_assert!(*first > q.arrival_time);
            }
            prop_assert!(q.token_completion_times.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn same_seed_same_report(seed in any::<u64>()) {
        let cfg = common::fuzz_config(seed, 1500);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        prop_assert_eq!(coserve::engine::metrics_json(&a.report), coserve::engine::metrics_json(&b.report));
        prop_assert_eq!(coserve::engine::requests_csv(&a.requests), coserve::engine::requests_csv(&b.requests));
    }
}
