use std::sync::Arc;

use edgeroute_core::classifier::{self, load_state, save_state, Architecture, InputDims, TrainConfig, TrainSet, ValidSet};
use edgeroute_core::evaluation::{
    self, ablation_run, build_bundles, compute_metrics, mes_sweep, raw_stats_map, route_dataset, AblationInput,
    RoutingPolicy, SweepPoint,
};
use edgeroute_core::features::{self, load_embeddings, EmbeddingTables, FeatureBundle, ModalityMask};
use edgeroute_core::labeling::{label_dataset, LabelStrategy};
use edgeroute_core::rsd::{pair_view, stratified_split, Dataset, ScenarioConfig, Split};
use edgeroute_core::synthgen::{self, SynthSpec, CLOUD_MODEL, EDGE_MODEL};

fn tiny_arch() -> Architecture {
    Architecture::Transformer {
        layers: 1,
        model_dim: 16,
        heads: 2,
        ffn_dim: 32,
        dropout: 0.1,
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 6,
        batch_size: 32,
        peak_learning_rate: 5e-3,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn files_round_trip_through_loaders() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthgen::generate(&SynthSpec::separable(50, 1.0, 21)).unwrap();
    let rsd = dir.path().join("rsd.jsonl");
    Dataset::new(data.records.clone()).unwrap().save(&rsd).unwrap();
    let text = dir.path().join("text.emb");
    features::save_embeddings(data.tables.text.as_ref().unwrap(), &text).unwrap();
    let loaded = Dataset::load(&rsd).unwrap();
    assert_eq!(loaded.records, data.records);
    let table = load_embeddings(&text).unwrap();
    assert_eq!(&table, data.tables.text.as_ref().unwrap());
}

#[test]
fn split_train_route_and_report() {
    let data = synthgen::generate(&SynthSpec::separable(300, 1.0, 17)).unwrap();
    let ds = Dataset::new(data.records.clone()).unwrap();
    let view = pair_view(&ds, EDGE_MODEL, CLOUD_MODEL).unwrap();
    assert_eq!(view.skipped, 0);
    let labels = label_dataset(&view.pairs, LabelStrategy::Proposed { mes: 6.0 }).unwrap();
    let label_map = labels.as_map();
    let split = stratified_split(&view.pairs, &label_map, [0.6, 0.2, 0.2], 9).unwrap();
    let train = split.select(&view.pairs, Split::Train);
    let valid = split.select(&view.pairs, Split::Valid);
    let test = split.select(&view.pairs, Split::Test);
    assert_eq!(train.len() + valid.len() + test.len(), 300);

    let raw = raw_stats_map(&view.pairs).unwrap();
    let train_raw: Vec<_> = train.iter().map(|p| raw[p.query_id()]).collect();
    let norm = features::fit_normalizer(&train_raw).unwrap();
    let mask = ModalityMask::ALL;
    let (tb, rep) = build_bundles(&train, &raw, &data.tables, &norm, mask).unwrap();
    assert_eq!(rep.missing_rate(), 0.0);
    let (vb, _) = build_bundles(&valid, &raw, &data.tables, &norm, mask).unwrap();
    let (sb, _) = build_bundles(&test, &raw, &data.tables, &norm, mask).unwrap();
    let tr: Vec<&FeatureBundle> = tb.iter().collect();
    let vr: Vec<&FeatureBundle> = vb.iter().collect();
    let y: Vec<u8> = train.iter().map(|p| label_map[p.query_id()]).collect();
    let dims = InputDims {
        text: data.tables.text_dim(),
        image: data.tables.image_dim(),
    };
    let trained = classifier::train(
        &tiny_arch(),
        dims,
        TrainSet { bundles: &tr, labels: &y },
        ValidSet {
            bundles: &vr,
            pairs: &valid,
        },
        &tiny_config(),
        &ScenarioConfig::rcs1(6.0),
        mask,
        norm,
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("router.bin");
    save_state(&trained.state, &path).unwrap();
    let state = load_state(&path).unwrap();
    assert_eq!(state, trained.state);

    let policy = RoutingPolicy::Router(Arc::new(state));
    let d = route_dataset(&policy, &test, &sb).unwrap();
    let m = compute_metrics("router", &d, &test, Some(&label_map), 6.0, &ScenarioConfig::presets(6.0)).unwrap();
    assert_eq!(m.n, test.len());
    assert!(m.acc.unwrap() >= 0.9, "acc {:?}", m.acc);
    let csv = evaluation::render_report(&[m], evaluation::ReportFormat::Csv).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn ablation_rows_and_modality_ordering() {
    let data = synthgen::generate(&SynthSpec::separable(300, 1.0, 23)).unwrap();
    let ds = Dataset::new(data.records.clone()).unwrap();
    let view = pair_view(&ds, EDGE_MODEL, CLOUD_MODEL).unwrap();
    let label_map = label_dataset(&view.pairs, LabelStrategy::Proposed { mes: 6.0 })
        .unwrap()
        .as_map();
    let split = stratified_split(&view.pairs, &label_map, [0.6, 0.2, 0.2], 2).unwrap();
    let train = split.select(&view.pairs, Split::Train);
    let valid = split.select(&view.pairs, Split::Valid);
    let test = split.select(&view.pairs, Split::Test);
    let input = AblationInput {
        train: &train,
        valid: &valid,
        test: &test,
        labels: &label_map,
        tables: &data.tables,
    };
    let masks = [
        ModalityMask::ALL,
        ModalityMask::new(true, false, false),
        ModalityMask::new(false, true, false),
        ModalityMask::new(false, false, true),
    ];
    let rows = ablation_run(&input, &masks, &tiny_arch(), &tiny_config(), &ScenarioConfig::rcs1(6.0)).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.policy.as_str()).collect();
    assert_eq!(
        names,
        ["router[ttt]", "router[tff]", "router[ftf]", "router[fft]", "random:p=0.5", "all-large", "all-small"]
    );
    let full = rows[0].rcs_for("rcs1").unwrap();
    for single in &rows[1..4] {
        assert!(full >= single.rcs_for("rcs1").unwrap(), "{} beats the full router", single.policy);
    }
    let small = rows.iter().find(|r| r.policy == "all-small").unwrap();
    let direct = test.iter().filter(|p| p.edge.score >= 6.0).count() as f64 / test.len() as f64;
    assert_eq!(small.apsp, direct);

    let two = ablation_run(
        &input,
        &[ModalityMask::ALL, ModalityMask::new(false, false, true)],
        &tiny_arch(),
        &TrainConfig {
            epochs: 1,
            ..tiny_config()
        },
        &ScenarioConfig::rcs1(6.0),
    )
    .unwrap();
    assert_eq!(two.len(), 5);
    assert!(ablation_run(&input, &[], &tiny_arch(), &tiny_config(), &ScenarioConfig::rcs1(6.0)).is_err());
}

#[test]
fn missing_embeddings_degrade_to_available_modalities() {
    let data = synthgen::generate(&SynthSpec::separable(20, 1.0, 4)).unwrap();
    let ds = Dataset::new(data.records.clone()).unwrap();
    let view = pair_view(&ds, EDGE_MODEL, CLOUD_MODEL).unwrap();
    let raw = raw_stats_map(&view.pairs).unwrap();
    let tables = EmbeddingTables {
        text: data.tables.text.clone(),
        image: None,
    };
    let (b, rep) = build_bundles(&view.pairs, &raw, &tables, &features::Normalizer::identity(), ModalityMask::ALL).unwrap();
    assert_eq!(rep.missing_image, 20);
    assert!(b.iter().all(|x| !x.mask.image && x.mask.text));
}

#[test]
fn sweep_over_mes_with_case_b_band() {
    let mut spec = SynthSpec::separable(400, 1.0, 31);
    spec.score.case_b_fraction = 0.25;
    let data = synthgen::generate(&spec).unwrap();
    let ds = Dataset::new(data.records.clone()).unwrap();
    let view = pair_view(&ds, EDGE_MODEL, CLOUD_MODEL).unwrap();
    let mes: Vec<f64> = (1..=9).map(f64::from).collect();
    let rows = mes_sweep(
        &view.pairs,
        |mes| LabelStrategy::Proposed { mes },
        &mes,
        |mes, labels| {
            // Oracle router: route by the freshly computed labels.
            let probs: Vec<f64> = labels.labels.iter().map(|l| l.label as f64).collect();
            let (tau, rcs) = evaluation::grid_search_tau(&probs, &view.pairs, &ScenarioConfig::rcs1(mes))?;
            Ok(SweepPoint {
                decisions: evaluation::decisions_at(&probs, &view.pairs, tau),
                tau_star: Some(tau),
                rcs_star: Some(rcs),
            })
        },
    )
    .unwrap();
    assert_eq!(rows[0].failure_rate, 0.0);
    assert!(rows.windows(2).all(|w| w[0].failure_rate <= w[1].failure_rate));
    assert!(rows[8].failure_rate > rows[4].failure_rate);
}
