//! Exit criteria for the routing toolkit. Each test prints one
//! `PASS`/`FAIL` line to stdout (uncaptured) and then asserts.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use edgeroute_core::classifier::network::bce_with_logits;
use edgeroute_core::classifier::{self, Architecture, Batch, InputDims, Network, TrainConfig, TrainSet, ValidSet};
use edgeroute_core::evaluation::{
    build_bundles, compute_metrics, core_metrics, decisions_at, grid_search_tau, mes_sweep, raw_stats_map,
    rcs_combine, route_dataset, tau_grid, RoutingPolicy, SweepPoint,
};
use edgeroute_core::features::{self, FeatureBundle, ModalityMask, STATS_DIM};
use edgeroute_core::labeling::{label_proposed, label_win, label_dataset, LabelStrategy};
use edgeroute_core::rsd::{pair_view, stratified_split, Dataset, PairRecord, ScenarioConfig, Split};
use edgeroute_core::synthgen::{self, oracle_best_tau, SynthSpec, CLOUD_MODEL, EDGE_MODEL};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(criterion: &str, pass: bool, elapsed: Duration, budget: Duration, detail: &str) -> bool {
    let ok = pass && elapsed <= budget;
    let line = format!(
        "[acceptance] {} {criterion}: {detail} ({:.2}s / budget {:.0}s)\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    ok
}

/// Held by the CPU-heavy criteria so timing measurements do not overlap training.
static HEAVY: std::sync::Mutex<()> = std::sync::Mutex::new(());

fn heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn pairs(records: &[edgeroute_core::ResponseRecord]) -> Vec<PairRecord<'_>> {
    records
        .iter()
        .map(|r| PairRecord {
            record: r,
            edge: &r.outcomes[EDGE_MODEL],
            cloud: &r.outcomes[CLOUD_MODEL],
        })
        .collect()
}

/// Reference (APSP, CA, AIL) triples with their RCS1/RCS2/RCS3 values.
const REFERENCE: &[(&str, [f64; 3], [f64; 3])] = &[
    ("38B/1B router", [0.506, 0.824, 4.53], [0.685, 0.601, 0.582]),
    ("38B/1B GBDT", [0.518, 0.631, 5.38], [0.680, 0.596, 0.577]),
    ("38B/1B MLP", [0.515, 0.645, 4.41], [0.678, 0.594, 0.575]),
    ("38B/1B MF", [0.503, 0.439, 4.49], [0.643, 0.551, 0.540]),
    ("38B/1B all-large", [0.549, 0.0, 7.44], [0.652, 0.542, 0.538]),
    ("38B/1B all-small", [0.456, 1.0, 0.94], [0.646, 0.575, 0.554]),
    ("8B/1B router", [0.483, 0.910, 1.34], [0.669, 0.591, 0.572]),
    ("8B/1B GBDT", [0.478, 0.941, 1.29], [0.666, 0.589, 0.570]),
    ("8B/1B MLP", [0.485, 0.873, 1.24], [0.668, 0.589, 0.570]),
    ("8B/1B MF", [0.469, 0.8, 1.18], [0.642, 0.564, 0.547]),
    ("8B/1B all-large", [0.529, 0.0, 1.63], [0.633, 0.527, 0.527]),
    ("8B/1B all-small", [0.456, 1.0, 0.94], [0.646, 0.575, 0.554]),
    ("38B/8B router", [0.533, 0.982, 1.77], [0.736, 0.649, 0.629]),
    ("38B/8B GBDT", [0.534, 0.965, 1.86], [0.735, 0.648, 0.628]),
    ("38B/8B MLP", [0.534, 0.887, 2.30], [0.727, 0.638, 0.619]),
    ("38B/8B MF", [0.529, 1.0, 1.63], [0.733, 0.647, 0.627]),
    ("38B/8B all-large", [0.549, 0.0, 7.44], [0.652, 0.542, 0.538]),
    ("38B/8B all-small", [0.529, 1.0, 1.63], [0.733, 0.647, 0.627]),
    ("ablation full", [0.5064, 0.8241, 4.5331], [0.6855, 0.6008, 0.5820]),
    ("ablation w/o text", [0.5079, 0.6720, 4.9529], [0.6718, 0.5836, 0.5767]),
    ("ablation w/o image", [0.5174, 0.5496, 4.7378], [0.6711, 0.5786, 0.5653]),
    ("ablation w/o stats", [0.5150, 0.6567, 5.1550], [0.6785, 0.5886, 0.5729]),
    ("ablation text only", [0.5152, 0.5710, 5.0925], [0.6702, 0.5786, 0.5647]),
    ("ablation image only", [0.5174, 0.5807, 4.9666], [0.6740, 0.5821, 0.5680]),
    ("ablation stats only", [0.4894, 0.9032, 4.4539], [0.6732, 0.5933, 0.5730]),
    ("ablation random", [0.4980, 0.5, 4.1653], [0.6434, 0.5538, 0.5418]),
    ("ablation all-large", [0.5492, 0.0, 7.4391], [0.6516, 0.5418, 0.5380]),
    ("ablation all-small", [0.4557, 1.0, 0.9359], [0.6459, 0.5748, 0.5543]),
];

#[test]
fn rcs_identity_against_reference_rows() {
    let start = Instant::now();
    let presets = ScenarioConfig::presets(6.0);
    let mut misses = Vec::new();
    for (row, [apsp, ca, ail], reference) in REFERENCE {
        for (s, want) in presets.iter().zip(reference) {
            let got = rcs_combine(*apsp, *ca, *ail, s.weights());
            if (got - want).abs() > 0.001 + 1e-12 {
                misses.push(format!("{row} {}: {got:.4} vs {want}", s.name));
            }
        }
    }
    let checked = REFERENCE.len() * 3;
    let detail = if misses.is_empty() {
        format!("{checked}/{checked} cells within 0.001")
    } else {
        format!("{}/{checked} cells within 0.001; off: {}", checked - misses.len(), misses.join("; "))
    };
    let ok = report("rcs identity", misses.is_empty(), start.elapsed(), Duration::from_secs(1), &detail);
    assert!(ok, "{detail}");
}

#[test]
fn labeling_matches_brute_force() {
    let start = Instant::now();
    let mut mismatches = 0;
    for e in 1..=10 {
        for c in 1..=10 {
            for m in 1..=10 {
                // Competent when edge reaches min(cloud, MES) or cloud misses MES.
                let floor = if c < m { c } else { m };
                let expected = u8::from(e >= floor || c < m);
                let (e, c, m) = (e as f64, c as f64, m as f64);
                mismatches += (label_proposed(e, c, m).unwrap() != expected) as usize;
                let hard = u8::from(e >= c);
                mismatches += (label_win(e, c, 0.0).unwrap() != hard) as usize;
                mismatches += (LabelStrategy::WinHard.label(e, c).unwrap() != hard) as usize;
            }
        }
    }
    let ok = report(
        "labeling oracle",
        mismatches == 0,
        start.elapsed(),
        Duration::from_secs(1),
        &format!("1000 triples, {mismatches} mismatches"),
    );
    assert!(ok);
}

#[test]
fn calibration_matches_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = Vec::new();
    for fixture in 0..50 {
        let n = rng.random_range(1..=200);
        let mut spec = SynthSpec::separable(n, 1.0, rng.random());
        spec.latency.cloud_slower = rng.random();
        let data = synthgen::generate(&spec).unwrap();
        let p = pairs(&data.records);
        let probs: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.2) { rng.random_range(0..=20) as f64 / 20.0 } else { rng.random() })
            .collect();
        let scenario = match fixture % 4 {
            0 => ScenarioConfig::rcs1(6.0),
            1 => ScenarioConfig::rcs2(6.0),
            2 => ScenarioConfig::rcs3(rng.random_range(1..=10) as f64),
            _ => ScenarioConfig::new("wide", 5.0, rng.random(), rng.random(), rng.random::<f64>() * 0.1).unwrap(),
        };
        let got = grid_search_tau(&probs, &p, &scenario).unwrap();
        let want = oracle_best_tau(&probs, &p, &scenario, &tau_grid()).unwrap();
        if got != want {
            mismatches.push(format!("fixture {fixture}: {got:?} vs {want:?}"));
        }
    }
    let ok = report(
        "calibration oracle",
        mismatches.is_empty(),
        start.elapsed(),
        Duration::from_secs(10),
        &format!("50 fixtures, {} mismatches {}", mismatches.len(), mismatches.join("; ")),
    );
    assert!(ok);
}

#[test]
fn monotonicity_suite() {
    let start = Instant::now();
    let mut violations = Vec::new();
    for seed in 0..20u64 {
        let mut spec = SynthSpec::separable(300, 1.0, seed);
        spec.latency.cloud_slower = true;
        let data = synthgen::generate(&spec).unwrap();
        let p = pairs(&data.records);
        assert!(p.iter().all(|x| x.cloud.latency >= x.edge.latency));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        // Scores of a noisy scorer correlated with the planted label.
        let probs: Vec<f64> = data
            .planted
            .iter()
            .map(|&y| (0.5 * y as f64 + 0.5 * rng.random::<f64>()).clamp(0.0, 1.0))
            .collect();
        let curve: Vec<(f64, f64, f64)> = tau_grid()
            .iter()
            .map(|&t| core_metrics(&decisions_at(&probs, &p, t), 6.0).unwrap())
            .collect();
        for (i, w) in curve.windows(2).enumerate() {
            if w[1].1 > w[0].1 {
                violations.push(format!("seed {seed}: CA rises at grid point {}", i + 1));
            }
            if w[1].2 < w[0].2 {
                violations.push(format!("seed {seed}: AIL falls at grid point {}", i + 1));
            }
        }
    }
    let ok = report(
        "monotonicity",
        violations.is_empty(),
        start.elapsed(),
        Duration::from_secs(30),
        &format!("20 seeds x 21 thresholds, {} violations {}", violations.len(), violations.join("; ")),
    );
    assert!(ok);
}

/// Denominator floor for tensors whose exact gradient is zero (key biases
/// under softmax), where both sides are rounding noise.
const GRAD_FLOOR: f64 = 1e-6;

fn tiny_gradient_check() -> f64 {
    let arch = Architecture::Transformer {
        layers: 2,
        model_dim: 8,
        heads: 2,
        ffn_dim: 16,
        dropout: 0.0,
    };
    let dims = InputDims { text: 4, image: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net: Network<f64> = Network::new(&arch, dims, &mut rng).unwrap();
    let mut fill = |c: usize| Array2::from_shape_fn((4, c), |_| rng.random_range(-1.0..1.0));
    let batch = Batch {
        text: fill(4),
        image: fill(3),
        stats: fill(STATS_DIM),
    };
    let y = Array1::from(vec![1.0, 0.0, 0.0, 1.0]);
    let (logits, cache) = net.forward::<ChaCha8Rng>(&batch, None);
    let (_, dl) = bce_with_logits(&logits, &y);
    let mut grad = net.zeros_like();
    net.backward(&batch, &cache, &dl, &mut grad);
    let analytic: Vec<Vec<f64>> = grad.params().into_iter().map(|(_, t)| t.iter().copied().collect()).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let mut num = Vec::with_capacity(a.len());
        for j in 0..a.len() {
            let orig = net.params()[k].1.iter().nth(j).copied().unwrap();
            let mut at = |v: f64| {
                *net.params_mut()[k].1.iter_mut().nth(j).unwrap() = v;
                bce_with_logits(&net.logits(&batch), &y).0
            };
            let up = at(orig + h);
            let down = at(orig - h);
            at(orig);
            num.push((up - down) / (2.0 * h));
        }
        let diff = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + num.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max(diff / scale.max(GRAD_FLOOR));
    }
    worst
}

#[test]
fn learning_check_on_separable_data() {
    let _heavy = heavy();
    let start = Instant::now();
    let data = synthgen::generate(&SynthSpec::separable(2000, 1.0, 7)).unwrap();
    let ds = Dataset::new(data.records.clone()).unwrap();
    let view = pair_view(&ds, EDGE_MODEL, CLOUD_MODEL).unwrap();
    let labels: HashMap<String, u8> = label_dataset(&view.pairs, LabelStrategy::Proposed { mes: 6.0 })
        .unwrap()
        .as_map();
    let split = stratified_split(&view.pairs, &labels, [0.6, 0.2, 0.2], 7).unwrap();
    let [train, valid, test] = Split::ALL.map(|s| split.select(&view.pairs, s));
    let raw = raw_stats_map(&view.pairs).unwrap();
    let norm = features::fit_normalizer(&train.iter().map(|p| raw[p.query_id()]).collect::<Vec<_>>()).unwrap();
    let bundles = |set: &[PairRecord<'_>]| build_bundles(set, &raw, &data.tables, &norm, ModalityMask::ALL).unwrap().0;
    let (tb, vb, sb) = (bundles(&train), bundles(&valid), bundles(&test));
    let tr: Vec<&FeatureBundle> = tb.iter().collect();
    let vr: Vec<&FeatureBundle> = vb.iter().collect();
    let y: Vec<u8> = train.iter().map(|p| labels[p.query_id()]).collect();
    let scenario = ScenarioConfig::rcs1(6.0);
    let trained = classifier::train(
        &Architecture::transformer(),
        InputDims {
            text: data.tables.text_dim(),
            image: data.tables.image_dim(),
        },
        TrainSet { bundles: &tr, labels: &y },
        ValidSet {
            bundles: &vr,
            pairs: &valid,
        },
        &TrainConfig::default(),
        &scenario,
        ModalityMask::ALL,
        norm.clone(),
    )
    .unwrap();
    let presets = ScenarioConfig::presets(6.0);
    let metrics = |policy: &RoutingPolicy| {
        let d = route_dataset(policy, &test, &sb).unwrap();
        compute_metrics(&policy.name(), &d, &test, Some(&labels), 6.0, &presets).unwrap()
    };
    let router = metrics(&RoutingPolicy::Router(Arc::new(trained.state)));
    let large = metrics(&RoutingPolicy::AllLarge);
    let small = metrics(&RoutingPolicy::AllSmall);
    let acc = router.acc.unwrap();
    let rcs = router.rcs_for("rcs1").unwrap();
    let baseline = large.rcs_for("rcs1").unwrap().max(small.rcs_for("rcs1").unwrap());
    let grad_err = tiny_gradient_check();
    let pass = acc >= 0.95 && rcs >= baseline && grad_err <= 1e-4;
    let ok = report(
        "learning check",
        pass,
        start.elapsed(),
        Duration::from_secs(300),
        &format!(
            "test ACC {acc:.4} (>= 0.95), RCS1 {rcs:.4} vs best baseline {baseline:.4}, gradient rel. error {grad_err:.2e} (<= 1e-4)"
        ),
    );
    assert!(ok);
}

#[test]
fn mes_sweep_failure_curve() {
    let start = Instant::now();
    let mut spec = SynthSpec::separable(1000, 1.0, 13);
    spec.score.case_b_fraction = 0.2;
    let data = synthgen::generate(&spec).unwrap();
    let p = pairs(&data.records);
    let band = p.iter().filter(|x| x.edge.score.max(x.cloud.score) < 6.0).count();
    let mes: Vec<f64> = (1..=9).map(f64::from).collect();
    let rows = mes_sweep(
        &p,
        |mes| LabelStrategy::Proposed { mes },
        &mes,
        |mes, labels| {
            let probs: Vec<f64> = labels.labels.iter().map(|l| l.label as f64).collect();
            let (tau, rcs) = grid_search_tau(&probs, &p, &ScenarioConfig::rcs1(mes))?;
            Ok(SweepPoint {
                decisions: decisions_at(&probs, &p, tau),
                tau_star: Some(tau),
                rcs_star: Some(rcs),
            })
        },
    )
    .unwrap();
    let curve: Vec<f64> = rows.iter().map(|r| r.failure_rate).collect();
    let monotone = curve.windows(2).all(|w| w[0] <= w[1]);
    let pass = band > 0 && monotone && curve[0] == 0.0;
    let shown: Vec<String> = curve.iter().map(|v| format!("{v:.3}")).collect();
    let ok = report(
        "mes sweep shape",
        pass,
        start.elapsed(),
        Duration::from_secs(30),
        &format!("failure rate at MES 1..9 = [{}]", shown.join(", ")),
    );
    assert!(ok);
}

#[derive(Clone)]
struct CountingStub {
    calls: Arc<std::sync::atomic::AtomicUsize>,
    addr: std::net::SocketAddr,
}

async fn counting_stub() -> CountingStub {
    use std::sync::atomic::{AtomicUsize, Ordering};
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = calls.clone();
    let app = axum::Router::new().fallback(move || {
        let counter = counter.clone();
        async move {
            counter.fetch_add(1, Ordering::SeqCst);
            axum::Json(serde_json::json!({"text": "stub"}))
        }
    });
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    CountingStub { calls, addr }
}

fn route_body(i: usize) -> String {
    let words = ["bar", "chart", "legend", "axis", "table", "count", "diagram", "sign"];
    let query: Vec<&str> = (0..3 + i % 23).map(|k| words[(i * 7 + k * 3) % words.len()]).collect();
    let mut body = serde_json::json!({ "query_text": format!("{}? {}", query.join(" "), i) });
    if i % 3 == 0 {
        body["image"] = serde_json::json!({"width": 64 + (i % 17) * 32, "height": 48 + (i % 11) * 40, "channels": 3});
    }
    if i % 4 == 1 {
        body["input_text"] = serde_json::json!("context ".repeat(i % 13));
    }
    body.to_string()
}

#[test]
fn gateway_integration() {
    let _heavy = heavy();
    use edgeroute_core::classifier::{RouterModel, RouterState};
    use edgeroute_core::evaluation::Side;
    use edgeroute_core::features::Normalizer;
    use edgeroute_gateway::{Engine, Gateway, GatewayConfig, RouteDecisionResponse, RouteRequest, Upstream};

    let start = Instant::now();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(workers)
        .enable_all()
        .build()
        .unwrap();
    let distinct = 500;
    let bodies: Vec<String> = (0..2 * distinct).map(|i| route_body(i % distinct)).collect();

    let synth = synthgen::generate(&SynthSpec::separable(20, 1.0, 5)).unwrap();
    let dims = InputDims {
        text: synth.tables.text_dim(),
        image: synth.tables.image_dim(),
    };
    let model = RouterModel::new(Architecture::transformer(), dims, 11).unwrap();
    let mut state = RouterState::new(model, ScenarioConfig::rcs1(6.0), ModalityMask::ALL, Normalizer::identity());
    state.tau = Some(0.5);
    let probe = Engine::from_state(state.clone()).unwrap();
    let expected: Vec<f64> = bodies[..distinct]
        .iter()
        .map(|b| {
            let req = RouteRequest::parse(b.as_bytes()).unwrap().prepare().unwrap();
            probe.score(&req, None, None).unwrap().p
        })
        .collect();
    let mut sorted = expected.clone();
    sorted.sort_by(f64::total_cmp);
    let tau = sorted[distinct / 2];
    state.tau = Some(tau);

    let (ok, detail) = rt.block_on(async {
        let (edge, cloud) = (counting_stub().await, counting_stub().await);
        let upstream = |s: &CountingStub| Upstream {
            url: format!("http://{}/", s.addr),
            timeout: Duration::from_secs(5),
        };
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("decisions.jsonl");
        let config = GatewayConfig {
            edge: Some(upstream(&edge)),
            cloud: Some(upstream(&cloud)),
            log_path: Some(log_path.clone()),
            ..GatewayConfig::dry_run("unused.bin")
        };
        let (gw, _guard) = Gateway::with_engine(config, Ok(Engine::from_state(state).unwrap())).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(gw.clone().serve(listener, std::future::pending()));

        let client = reqwest::Client::new();
        let url = format!("http://{addr}/v1/route");
        let responses: Vec<RouteDecisionResponse> = futures::future::join_all(bodies.iter().map(|b| {
            let (client, url, b) = (client.clone(), url.clone(), b.clone());
            async move {
                let r = client.post(url).body(b).send().await.unwrap();
                assert_eq!(r.status().as_u16(), 200);
                r.json().await.unwrap()
            }
        }))
        .await;
        gw.flush_log().await;

        let m = gw.metrics();
        let identity = m.edge_routed + m.cloud_routed == m.requests_total
            && m.requests_total == bodies.len() as u64
            && m.errors == 0
            && m.in_flight == 0;
        let upstream_calls = edge.calls.load(std::sync::atomic::Ordering::SeqCst)
            + cloud.calls.load(std::sync::atomic::Ordering::SeqCst);
        let deterministic = responses.iter().enumerate().all(|(i, r)| {
            let twin = &responses[(i + distinct) % bodies.len()];
            let want = expected[i % distinct];
            let side = if want >= tau { Side::Edge } else { Side::Cloud };
            r.p == want && r.decision == side && r.p == twin.p && r.decision == twin.decision
        });
        let edge_share = m.edge_routed as f64 / m.requests_total as f64;
        let mixed = m.edge_routed > 0 && m.cloud_routed > 0;
        let mut overhead: Vec<f64> = responses.iter().map(|r| r.router_overhead_s).collect();
        overhead.sort_by(f64::total_cmp);
        let rank = |q: f64| overhead[(q * overhead.len() as f64).ceil() as usize - 1];
        let (p50, p99) = (rank(0.5), rank(0.99));
        let log_lines = std::fs::read_to_string(&log_path).unwrap().lines().count();
        let replay_ca = edgeroute_gateway::decision_log::replay(&log_path).unwrap().ca().unwrap();
        let ok = identity
            && upstream_calls == 0
            && deterministic
            && mixed
            && p99 < 0.005
            && log_lines == bodies.len()
            && (replay_ca - edge_share).abs() < 1e-12;
        let detail = format!(
            "{} concurrent dry-run requests on {workers} worker(s): edge {} + cloud {} = total {} (errors {}, in flight {}), \
             upstream calls {upstream_calls}, deterministic {deterministic}, router overhead p50 {:.3} ms, p99 {:.3} ms (< 5 ms), \
             {log_lines} log lines, replayed CA {replay_ca:.4}",
            bodies.len(),
            m.edge_routed,
            m.cloud_routed,
            m.requests_total,
            m.errors,
            m.in_flight,
            p50 * 1e3,
            p99 * 1e3
        );
        (ok, detail)
    });
    let ok = report("gateway integration", ok, start.elapsed(), Duration::from_secs(60), &detail);
    assert!(ok);
}

fn run_cli(dir: &std::path::Path, threads: &str, args: &[&str]) -> std::process::Output {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_edgeroute"))
        .current_dir(dir)
        .env("ECVL_THREADS", threads)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "edgeroute {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn pipeline(dir: &std::path::Path, threads: &str) -> Vec<u8> {
    let emb = ["--text-emb", "text.emb", "--image-emb", "image.emb"];
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--n", "600", "--seed", "21"],
        vec!["ingest", "rsd.jsonl"],
        vec!["label", "rsd.jsonl"],
        vec!["split", "rsd.jsonl", "--seed", "21"],
        [&["train", "rsd.jsonl", "--epochs", "10", "--seed", "21"][..], &emb].concat(),
        [&["calibrate", "rsd.jsonl"][..], &emb].concat(),
        [
            &["evaluate", "rsd.jsonl", "--labels", "labels.jsonl", "--policy", "router,all-large,all-small,random:p=0.5"][..],
            &emb,
        ]
        .concat(),
        vec!["report", "eval.json", "--out", "report.csv"],
    ];
    for step in &steps {
        run_cli(dir, threads, step);
    }
    std::fs::read(dir.join("report.csv")).unwrap()
}

#[test]
fn end_to_end_determinism() {
    let _heavy = heavy();
    let start = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path(), "1");
    let second = pipeline(b.path(), "2");
    let same_model = std::fs::read(a.path().join("router.bin")).unwrap() == std::fs::read(b.path().join("router.bin")).unwrap();
    let rows = String::from_utf8_lossy(&first).lines().count().saturating_sub(1);
    let ok = report(
        "end-to-end determinism",
        first == second && same_model && rows == 4,
        start.elapsed(),
        Duration::from_secs(600),
        &format!(
            "synth, label, split, train, calibrate, evaluate, report run twice (1 and 2 threads): reports identical {}, models identical {same_model}, {rows} policy rows",
            first == second
        ),
    );
    assert!(ok);
}
