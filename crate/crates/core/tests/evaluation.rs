use std::collections::{BTreeMap, HashMap};

use edgeroute_core::evaluation::{
    self, core_metrics, decisions_at, grid_search_tau, rcs_combine, route_dataset, tau_grid, RoutingPolicy, Side,
};
use edgeroute_core::labeling::{label_dataset, LabelStrategy};
use edgeroute_core::rsd::{ModelOutcome, PairRecord, ResponseRecord, ScenarioConfig};
use edgeroute_core::synthgen::{self, oracle_best_tau, SynthSpec, CLOUD_MODEL, EDGE_MODEL};
use proptest::prelude::*;

fn record(id: usize, edge: (f64, f64), cloud: (f64, f64)) -> ResponseRecord {
    let mut outcomes = BTreeMap::new();
    for (name, (score, latency)) in [(EDGE_MODEL, edge), (CLOUD_MODEL, cloud)] {
        outcomes.insert(
            name.to_owned(),
            ModelOutcome {
                model_name: name.to_owned(),
                score,
                latency,
                tokens_out: None,
            },
        );
    }
    ResponseRecord {
        query_id: format!("r{id}"),
        source_dataset: "prop".into(),
        query_text: "q".into(),
        input_text: String::new(),
        image: None,
        image_path: None,
        outcomes,
    }
}

fn pairs(records: &[ResponseRecord]) -> Vec<PairRecord<'_>> {
    records
        .iter()
        .map(|r| PairRecord {
            record: r,
            edge: &r.outcomes[EDGE_MODEL],
            cloud: &r.outcomes[CLOUD_MODEL],
        })
        .collect()
}

fn arb_records(cloud_dominates: bool) -> impl Strategy<Value = Vec<ResponseRecord>> {
    prop::collection::vec((1u8..=10, 1u8..=10, 0.0f64..5.0, 0.0f64..5.0), 1..60).prop_map(move |rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (e, c, le, lc))| {
                let (e, c) = if cloud_dominates { (e.min(c), e.max(c)) } else { (e, c) };
                let (le, lc) = if cloud_dominates { (le.min(lc), le.max(lc)) } else { (le, lc) };
                record(i, (e as f64, le), (c as f64, lc))
            })
            .collect()
    })
}

fn arb_probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![0.0f64..=1.0, (0u8..=20).prop_map(|i| i as f64 / 20.0)], n)
}

fn scenario() -> impl Strategy<Value = ScenarioConfig> {
    (1u8..=10, 0.0f64..2.0, 0.0f64..0.5, 0.0f64..0.05)
        .prop_map(|(mes, a, b, g)| ScenarioConfig::new("custom", mes as f64, a, b, g).unwrap())
}

#[test]
fn label_dataset_three_pairs() {
    let recs = vec![
        record(0, (7.0, 1.0), (9.0, 2.0)),
        record(1, (3.0, 1.0), (9.0, 2.0)),
        record(2, (2.0, 1.0), (4.0, 2.0)),
    ];
    let p = pairs(&recs);
    let bits = |s| -> Vec<u8> { label_dataset(&p, s).unwrap().labels.iter().map(|l| l.label).collect() };
    assert_eq!(bits(LabelStrategy::Proposed { mes: 6.0 }), [1, 0, 1]);
    assert_eq!(bits(LabelStrategy::WinHard), [0, 0, 0]);
    assert_eq!(bits(LabelStrategy::WinSoft { k: 2.0 }), [1, 0, 1]);
    assert_eq!(bits(LabelStrategy::WinSoft { k: 1.0 }), [0, 0, 0]);
    assert!(label_dataset(&[], LabelStrategy::WinHard).is_err());
}

#[test]
fn all_small_apsp_is_edge_hit_rate() {
    let data = synthgen::generate(&SynthSpec::separable(300, 1.0, 12)).unwrap();
    let p = pairs(&data.records);
    let d = route_dataset(&RoutingPolicy::AllSmall, &p, &[]).unwrap();
    let (apsp, ca, _) = core_metrics(&d, 6.0).unwrap();
    let direct = p.iter().filter(|x| x.edge.score >= 6.0).count() as f64 / p.len() as f64;
    assert_eq!(apsp, direct);
    assert_eq!(ca, 1.0);
}

#[test]
fn savings_match_brute_force_sum() {
    let data = synthgen::generate(&SynthSpec::separable(250, 1.0, 5)).unwrap();
    let p = pairs(&data.records);
    let d = route_dataset(&RoutingPolicy::AllSmall, &p, &[]).unwrap();
    let (tokens, time) = evaluation::savings(&d, &p).unwrap();
    let mut t = 0i64;
    let mut s = 0.0;
    for r in &data.records {
        let e = &r.outcomes[EDGE_MODEL];
        let c = &r.outcomes[CLOUD_MODEL];
        t += c.tokens_out.unwrap() as i64 - e.tokens_out.unwrap() as i64;
        s += c.latency - e.latency;
    }
    assert_eq!(tokens, Some(t));
    assert!((time - s).abs() < 1e-9);
}

#[test]
fn failure_rate_is_monotone_on_synthetic_data() {
    let data = synthgen::generate(&SynthSpec::separable(500, 1.0, 6)).unwrap();
    let p = pairs(&data.records);
    let mut prev = -1.0;
    for mes in 1..=10 {
        let direct = p.iter().filter(|x| x.edge.score.max(x.cloud.score) < mes as f64).count() as f64 / p.len() as f64;
        let fr = evaluation::failure_rate(&p, mes as f64);
        assert_eq!(fr, direct);
        assert!(fr >= prev);
        prev = fr;
    }
    assert_eq!(evaluation::failure_rate(&p, 1.0), 0.0);
}

proptest! {
    #[test]
    fn grid_search_equals_oracle((recs, seed) in (arb_records(false), any::<u64>()), s in scenario()) {
        let p = pairs(&recs);
        let probs: Vec<f64> = (0..p.len()).map(|i| ((seed.wrapping_mul(31).wrapping_add(i as u64 * 7919)) % 101) as f64 / 100.0).collect();
        prop_assert_eq!(grid_search_tau(&probs, &p, &s).unwrap(), oracle_best_tau(&probs, &p, &s, &tau_grid()).unwrap());
    }

    #[test]
    fn ca_non_increasing_in_tau(recs in arb_records(false), probs in arb_probs(60)) {
        let p = pairs(&recs);
        let probs = &probs[..p.len()];
        let cas: Vec<f64> = tau_grid().iter().map(|&t| core_metrics(&decisions_at(probs, &p, t), 6.0).unwrap().1).collect();
        prop_assert!(cas.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn ail_non_decreasing_when_cloud_slower(recs in arb_records(true), probs in arb_probs(60)) {
        let p = pairs(&recs);
        let probs = &probs[..p.len()];
        let ails: Vec<f64> = tau_grid().iter().map(|&t| core_metrics(&decisions_at(probs, &p, t), 6.0).unwrap().2).collect();
        prop_assert!(ails.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn apsp_between_baselines_when_cloud_dominates(recs in arb_records(true), probs in arb_probs(60), mes in 1u8..=10) {
        let p = pairs(&recs);
        let probs = &probs[..p.len()];
        let mes = mes as f64;
        let lo = core_metrics(&route_dataset(&RoutingPolicy::AllSmall, &p, &[]).unwrap(), mes).unwrap().0;
        let hi = core_metrics(&route_dataset(&RoutingPolicy::AllLarge, &p, &[]).unwrap(), mes).unwrap().0;
        for t in tau_grid() {
            let a = core_metrics(&decisions_at(probs, &p, t), mes).unwrap().0;
            prop_assert!(a >= lo.min(hi) && a <= lo.max(hi));
        }
    }

    #[test]
    fn baseline_identities(recs in arb_records(false), seed in any::<u64>()) {
        let p = pairs(&recs);
        let large = route_dataset(&RoutingPolicy::AllLarge, &p, &[]).unwrap();
        let small = route_dataset(&RoutingPolicy::AllSmall, &p, &[]).unwrap();
        prop_assert_eq!(core_metrics(&large, 6.0).unwrap().1, 0.0);
        prop_assert_eq!(core_metrics(&small, 6.0).unwrap().1, 1.0);
        let rnd = route_dataset(&RoutingPolicy::Random { p_edge: 1.0, seed }, &p, &[]).unwrap();
        prop_assert_eq!(rnd, small);
    }

    #[test]
    fn rcs_is_linear(apsp in 0.0f64..1.0, ca in 0.0f64..1.0, ail in 0.0f64..20.0,
                     a in 0.0f64..3.0, b in 0.0f64..1.0, g in 0.0f64..0.01, c in 0.01f64..100.0, d in -1.0f64..1.0) {
        let w = (a, b, g);
        let base = rcs_combine(apsp, ca, ail, w);
        let scaled = rcs_combine(apsp, ca, ail, (c * a, c * b, c * g));
        prop_assert!((scaled - c * base).abs() <= 1e-9 * (1.0 + scaled.abs()));
        // Additive in each argument.
        let shifted = rcs_combine(apsp + d, ca, ail, w);
        prop_assert!((shifted - base - a * d).abs() <= 1e-9);
        let shifted = rcs_combine(apsp, ca + d, ail, w);
        prop_assert!((shifted - base - b * d).abs() <= 1e-9);
        let shifted = rcs_combine(apsp, ca, ail + d, w);
        prop_assert!((shifted - base + g * d).abs() <= 1e-9);
    }

    #[test]
    fn argmax_invariant_to_weight_scaling(triples in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..10.0), 2..8), c in 0.1f64..10.0) {
        let w = (1.2, 0.1, 0.001);
        let argmax = |w: (f64, f64, f64)| {
            let scores: Vec<f64> = triples.iter().map(|&(a, b, l)| rcs_combine(a, b, l, w)).collect();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let second = scores.iter().cloned().filter(|&s| s < best).fold(f64::NEG_INFINITY, f64::max);
            (scores.iter().position(|&s| s == best).unwrap(), best - second)
        };
        let (i, gap) = argmax(w);
        // Only assert when the winner is not within rounding distance of a tie.
        prop_assume!(gap > 1e-9);
        prop_assert_eq!(argmax((c * w.0, c * w.1, c * w.2)).0, i);
    }
}

#[test]
fn accuracy_uses_strategy_specific_labels() {
    let recs = vec![record(0, (5.0, 1.0), (6.0, 2.0)), record(1, (7.0, 1.0), (6.0, 2.0))];
    let p = pairs(&recs);
    let d = route_dataset(&RoutingPolicy::AllSmall, &p, &[]).unwrap();
    let acc_for = |s| {
        let labels: HashMap<String, u8> = label_dataset(&p, s).unwrap().as_map();
        evaluation::compute_metrics("all-small", &d, &p, Some(&labels), 6.0, &[]).unwrap().acc.unwrap()
    };
    assert_eq!(acc_for(LabelStrategy::WinHard), 0.5);
    assert_eq!(acc_for(LabelStrategy::WinSoft { k: 1.0 }), 1.0);
    assert!(d.iter().all(|x| x.chosen == Side::Edge));
}
