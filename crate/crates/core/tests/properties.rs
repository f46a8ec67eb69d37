use proptest::prelude::*;
use seqaudit_core::exact::{propagate, reach_at};
use seqaudit_core::io::{artifact_from_str, artifact_to_string, OcExport, ReplayExport, RunManifest, SessionExport};
use seqaudit_core::*;

fn rule_strategy(max_n: u32) -> impl Strategy<Value = StoppingRule> {
    (2..=max_n)
        .prop_flat_map(|n| {
            let thresholds = (1..n).map(|t| (0..=t, 0..=t)).collect::<Vec<_>>();
            (Just(n), thresholds, 1..=n)
        })
        .prop_flat_map(|(n, th, first)| (Just(n), Just(th), Just(first), first..=n))
        .prop_flat_map(|(n, th, first, term)| (Just(n), Just(th), Just(first), Just(term), 0..=term))
        .prop_map(|(n, th, first_stop, terminal_stage, h_max)| {
            let (lower, upper) = th.into_iter().unzip();
            StoppingRule {
                n,
                lower,
                upper,
                first_stop,
                terminal_stage,
                terminal_accept_h_max: h_max,
            }
        })
}

fn small_config() -> impl Strategy<Value = DesignConfig> {
    (10u32..80, 0.15f64..0.6, 0.03f64..0.12, 0.01f64..0.3, 0.01f64..0.3)
        .prop_map(|(n, r, th, a, b)| DesignConfig::new(n, r, th, th, a, b))
        .prop_filter("valid design", |c| c.validate().is_ok())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pmf_sums_to_one(n in 1u32..=500, m_frac in 0.0f64..=1.0, t_frac in 0.0f64..=1.0) {
        let m = (f64::from(n) * m_frac) as u32;
        let t = (f64::from(n) * t_frac) as u32;
        let total: f64 = (0..=t).map(|s| hypergeom_pmf(n, m, t, s).unwrap()).sum();
        prop_assert!((total - 1.0).abs() < 1e-10, "{total}");
    }

    #[test]
    fn unrestricted_propagation_is_hypergeometric(n in 1u32..=200, m_frac in 0.0f64..=1.0) {
        let m = (f64::from(n) * m_frac) as u32;
        let mut reach = ReachTable::initial();
        for t in 1..=n {
            reach = propagate(&reach, n, m, 0, t.saturating_sub(1)).unwrap();
            for s in 0..=t {
                prop_assert!((reach.at(s) - hypergeom_pmf(n, m, t, s).unwrap()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dp_matches_enumeration(rule in rule_strategy(8), m_frac in 0.0f64..=1.0) {
        let m = (f64::from(rule.n) * m_frac) as u32;
        let dp = exact_outcome(&rule, m).unwrap();
        let bf = brute_force_crossing(&rule, m).unwrap();
        for (a, b) in [
            (dp.upper_cross, bf.upper_cross),
            (dp.lower_cross, bf.lower_cross),
            (dp.accept_k, bf.accept_k),
            (dp.expected_tau, bf.expected_tau),
        ] {
            prop_assert!((a - b).abs() < 1e-12, "{dp:?} vs {bf:?}");
        }
    }

    #[test]
    fn mass_is_conserved(rule in rule_strategy(40), m_frac in 0.0f64..=1.0) {
        let n = rule.n;
        let m = (f64::from(n) * m_frac) as u32;
        let mut stopped = 0.0;
        for t in 1..n {
            let i = (t - 1) as usize;
            let reach = reach_at(n, m, &rule.lower[..i], &rule.upper[..i], t).unwrap();
            prop_assert!((stopped + reach.total() - 1.0).abs() < 1e-12, "stage {t}");
            let (lo, hi) = (rule.lower[i], rule.upper[i]);
            stopped += (0..=t).filter(|&s| s < lo || s > hi).map(|s| reach.at(s)).sum::<f64>();
        }
    }

    #[test]
    fn exact_ledgers_stay_within_levels(config in small_config()) {
        let s = calibrate(&config.with_backend(Backend::Exact)).unwrap();
        prop_assert!(s.cum_alpha.iter().all(|&a| a <= s.config.alpha));
        prop_assert!(s.cum_beta.iter().all(|&b| b <= s.config.beta));
        prop_assert!(s.cum_alpha.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(s.cum_beta.windows(2).all(|w| w[0] <= w[1]));
        let (m_h, m_k) = s.config.calibration_counts();
        prop_assert!(exact_outcome(&s.rule, m_h).unwrap().accept_k <= s.config.alpha + 1e-10);
        prop_assert!(exact_outcome(&s.rule, m_k).unwrap().accept_h <= s.config.beta + 1e-10);
    }

    #[test]
    fn mc_ledgers_stay_within_levels(config in small_config(), seed in any::<u64>()) {
        let s = calibrate(&config.with_mc(500, seed)).unwrap();
        prop_assert!(s.cum_alpha.iter().all(|&a| a <= s.config.alpha));
        prop_assert!(s.cum_beta.iter().all(|&b| b <= s.config.beta));
    }

    #[test]
    fn full_inspection_is_never_wrong(config in small_config(), m_frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let s = calibrate(&config.with_backend(Backend::Exact)).unwrap();
        let n = s.n();
        let m = (f64::from(n) * m_frac) as u32;
        let path = sample_path(&synth_population(n, m).unwrap(), seed);
        let out = run_path(&s.rule, &path).unwrap();
        prop_assert!((1..=n).contains(&out.tau));
        if out.source == DecisionSource::TerminalFullInspection {
            let nr = f64::from(n) * s.config.r;
            let want = if f64::from(m) <= nr + 1e-9 { Decision::AcceptH } else { Decision::AcceptK };
            prop_assert_eq!(out.decision, want);
        }
    }

    #[test]
    fn truncated_runs_end_by_t(config in small_config(), t_frac in 0.2f64..1.0, m_frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let n = config.n;
        let t_cap = ((f64::from(n) * t_frac) as u32).max(1);
        let c = config.with_variant(Variant::Truncated).with_truncation(t_cap).with_backend(Backend::Exact);
        let s = calibrate(&c).unwrap();
        let m = (f64::from(n) * m_frac) as u32;
        let out = run_path(&s.rule, &sample_path(&synth_population(n, m).unwrap(), seed)).unwrap();
        prop_assert!(out.tau >= 1 && out.tau <= t_cap);
    }
}

#[test]
fn exact_operating_characteristics_are_monotone() {
    for n in [20u32, 30, 40] {
        for r in [0.2, 0.3, 0.5] {
            let c = DesignConfig::new(n, r, 0.1, 0.1, 0.05, 0.1).with_backend(Backend::Exact);
            let s = calibrate(&c).unwrap();
            let oc: Vec<_> = (0..=n).map(|m| exact_outcome(&s.rule, m).unwrap()).collect();
            for w in oc.windows(2) {
                assert!(w[0].accept_k <= w[1].accept_k + 1e-12, "n={n} r={r}");
            }
            let (m_h, m_k) = c.calibration_counts();
            assert!(oc[0].expected_tau <= oc[m_h as usize].expected_tau + 1e-12);
            assert!(oc[n as usize].expected_tau <= oc[m_k as usize].expected_tau + 1e-12);
        }
    }
}

#[test]
fn sampling_is_independent_of_thread_count() {
    let pop = synth_population(300, 41).unwrap();
    let paths = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| (0..50).map(|seed| sample_path(&pop, seed)).collect::<Vec<_>>())
    };
    assert_eq!(paths(1), paths(3));
    let c = DesignConfig::new(80, 0.2, 0.05, 0.05, 0.05, 0.05).with_mc(2_000, 5);
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| calibrate(&c).unwrap());
    assert_eq!(one, calibrate(&c).unwrap());
}

fn assert_round_trip<T: io::Artifact + PartialEq + std::fmt::Debug>(artifact: &T) {
    let text = artifact_to_string(artifact).unwrap();
    let back: T = artifact_from_str(&text).unwrap();
    assert_eq!(&back, artifact);
    assert_eq!(artifact_to_string(&back).unwrap(), text);
}

#[test]
fn every_artifact_round_trips() {
    let c = DesignConfig::new(60, 0.2, 0.05, 0.05, 0.05, 0.05).with_mc(1_000, 3);
    for variant in Variant::ALL {
        let mut c = c.clone().with_variant(variant);
        match variant {
            Variant::TwoStage => c = c.with_t0(5),
            Variant::Truncated => c = c.with_truncation(40),
            _ => {}
        }
        let s = calibrate(&c).unwrap();
        assert_round_trip(&s);

        let oc = oc_curve(&s, &[0, 9, 15, 60], 200, 4).unwrap();
        assert_round_trip(&OcExport::new(&s, 4, 200, oc));

        let summary = replay(&synth_population(60, 20).unwrap(), &s, 200, 4).unwrap();
        assert_round_trip(&ReplayExport::new(&s, 4, summary));

        let mut session = new_session(&s, variant).unwrap();
        for x in [0, 1, 0, 0, 1] {
            if session.status() == Status::Continue {
                session.observe(x).unwrap();
            }
        }
        assert_round_trip(&SessionExport::new(&s, &session));
        assert_round_trip(&RunManifest::new(&c).with_artifact("schedule", "schedule.json"));
    }
}
