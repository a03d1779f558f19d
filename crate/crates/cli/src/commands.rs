use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use edgeroute_core::classifier::{self, load_state, save_state, Architecture, InputDims, RouterState, TrainConfig, TrainSet, ValidSet};
use edgeroute_core::evaluation::{
    self, ablation_run, build_bundles, compute_metrics, decisions_at, grid_search_tau, mes_sweep, raw_stats_map,
    render_report, render_sweep, route_dataset, AblationInput, MetricsReport, ReportFormat, RoutingPolicy, SweepPoint,
};
use edgeroute_core::features::{self, EmbeddingTables, FeatureBundle, Modality, ModalityMask, Normalizer};
use edgeroute_core::fsutil::{read_to_string, write_atomic};
use edgeroute_core::labeling::{label_dataset, LabelSet, LabelStrategy};
use edgeroute_core::rsd::{pair_view, stratified_split, Dataset, PairRecord, ScenarioConfig, Split, SplitAssignment};
use edgeroute_core::synthgen::{self, SynthSpec};
use edgeroute_gateway::GatewayConfig;

use crate::args::*;
use crate::error::{CliError, CliResult};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn run(cli: Cli) -> CliResult<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Ingest(a) => ingest(&a),
        Command::Label(a) => label(&a),
        Command::Split(a) => split(&a),
        Command::Train(a) => train(&a),
        Command::Calibrate(a) => calibrate(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::SweepMes(a) => sweep(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Synth(a) => synth(&a),
        Command::Serve(a) => serve(&a),
        Command::Report(a) => report(&a),
    }
}

fn load_dataset(input: &Input) -> CliResult<Dataset> {
    Ok(Dataset::load(input.path())?)
}

fn pairs<'a>(ds: &'a Dataset, m: &Models) -> CliResult<Vec<PairRecord<'a>>> {
    let view = pair_view(ds, &m.edge, &m.cloud)?;
    if view.skipped > 0 {
        log::warn!("{} records lack an outcome for {} or {} and were skipped", view.skipped, m.edge, m.cloud);
    }
    Ok(view.pairs)
}

fn load_labels(path: &Path) -> CliResult<HashMap<String, u8>> {
    Ok(LabelSet::from_jsonl(&read_to_string(path)?)?.as_map())
}

fn load_split(path: &Path) -> CliResult<SplitAssignment> {
    Ok(SplitAssignment::from_jsonl(&read_to_string(path)?)?)
}

fn parse_split(name: &str) -> CliResult<Split> {
    name.parse().map_err(|e: edgeroute_core::Error| usage(e.to_string()))
}

fn load_tables(e: &Embeddings) -> CliResult<EmbeddingTables> {
    let load = |path: &Option<std::path::PathBuf>, want: Modality| -> CliResult<_> {
        let Some(path) = path else { return Ok(None) };
        let table = features::load_embeddings(path)?;
        if table.modality != want {
            return Err(CliError::Data(format!(
                "{} holds {:?} embeddings, expected {want:?}",
                path.display(),
                table.modality
            )));
        }
        Ok(Some(table))
    };
    Ok(EmbeddingTables {
        text: load(&e.text_emb, Modality::Text)?,
        image: load(&e.image_emb, Modality::Image)?,
    })
}

fn scenario_from(name: &str, weights: Option<&str>, mes: f64) -> CliResult<ScenarioConfig> {
    let preset = ScenarioConfig::preset(name, mes).ok_or_else(|| usage(format!("unknown scenario {name:?} (rcs1|rcs2|rcs3)")))?;
    preset.validate()?;
    let Some(w) = weights else { return Ok(preset) };
    let parts: Vec<f64> = w
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--weights expects A,B,G numbers, got {w:?}")))?;
    let [a, b, g] = parts[..] else {
        return Err(usage(format!("--weights expects three numbers, got {w:?}")));
    };
    Ok(ScenarioConfig::new("custom", mes, a, b, g)?)
}

fn scenario(s: &ScenarioArgs) -> CliResult<ScenarioConfig> {
    scenario_from(&s.scenario, s.weights.as_deref(), s.mes)
}

fn architecture(a: &ArchArgs) -> CliResult<Architecture> {
    let arch = match a.variant.as_str() {
        "transformer" => Architecture::Transformer {
            layers: a.layers,
            model_dim: a.model_dim,
            heads: a.heads,
            ffn_dim: a.ffn_dim,
            dropout: a.dropout,
        },
        "mlp" => Architecture::Mlp {
            model_dim: a.model_dim,
            hidden: a
                .hidden
                .split(',')
                .map(|h| h.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| usage(format!("--hidden expects comma-separated widths, got {:?}", a.hidden)))?,
        },
        "mf" => Architecture::BilinearMf {
            model_dim: a.model_dim,
            rank: a.rank,
        },
        other => return Err(usage(format!("unknown variant {other:?}"))),
    };
    arch.validate().map_err(|e| usage(e.to_string()))?;
    Ok(arch)
}

fn train_config(o: &Optimizer) -> CliResult<TrainConfig> {
    let c = TrainConfig {
        epochs: o.epochs,
        batch_size: o.batch_size,
        peak_learning_rate: o.lr,
        seed: o.seed,
        grad_clip: o.grad_clip,
        ..TrainConfig::default()
    };
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn parse_mask(code: &str) -> CliResult<ModalityMask> {
    ModalityMask::parse(code).map_err(|e| usage(e.to_string()))
}

fn parse_ratios(s: &str) -> CliResult<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--ratios expects TRAIN:VALID:TEST, got {s:?}")))?;
    let [a, b, c] = parts[..] else {
        return Err(usage(format!("--ratios expects three parts, got {s:?}")));
    };
    let total = a + b + c;
    if [a, b, c].iter().any(|v| !v.is_finite() || *v < 0.0) || total <= 0.0 {
        return Err(usage(format!("--ratios must be non-negative with a positive sum, got {s:?}")));
    }
    Ok([a / total, b / total, c / total])
}

fn bundles(
    pairs: &[PairRecord<'_>],
    tables: &EmbeddingTables,
    normalizer: &Normalizer,
    mask: ModalityMask,
) -> CliResult<Vec<FeatureBundle>> {
    let raw = raw_stats_map(pairs)?;
    let (b, report) = build_bundles(pairs, &raw, tables, normalizer, mask)?;
    if report.missing_text + report.missing_image > 0 {
        log::warn!(
            "missing embeddings: {} text, {} image of {} queries; those modalities are masked off",
            report.missing_text,
            report.missing_image,
            report.bundles
        );
    }
    Ok(b)
}

fn ingest(a: &IngestArgs) -> CliResult<()> {
    let ds = load_dataset(&a.input)?;
    println!("records={}", ds.len());
    println!("with_image={}", ds.records.iter().filter(|r| r.has_image()).count());
    for (model, n) in ds.model_counts() {
        println!("model {model}={n}");
    }
    for (source, n) in ds.source_counts() {
        println!("source {source}={n}");
    }
    Ok(())
}

fn label(a: &LabelArgs) -> CliResult<()> {
    let strategy: LabelStrategy = a.strategy.parse().map_err(|e: edgeroute_core::Error| usage(e.to_string()))?;
    let ds = load_dataset(&a.input)?;
    let pairs = pairs(&ds, &a.models)?;
    let labels = label_dataset(&pairs, strategy)?;
    if labels.is_degenerate() {
        log::warn!("all labels are {}; a router trained on them is constant", labels.labels[0].label);
    }
    write_atomic(&a.out, labels.to_jsonl().as_bytes())?;
    println!("labeled {} queries with {strategy}; positive rate {:.4}", labels.labels.len(), labels.positive_rate);
    Ok(())
}

fn split(a: &SplitArgs) -> CliResult<()> {
    let ratios = parse_ratios(&a.ratios)?;
    let ds = load_dataset(&a.input)?;
    let pairs = pairs(&ds, &a.models)?;
    let labels = load_labels(&a.labels)?;
    let s = stratified_split(&pairs, &labels, ratios, a.seed)?;
    let counts = s.counts();
    for (split, n) in Split::ALL.iter().zip(counts) {
        if n == 0 {
            log::warn!("{split} split is empty");
        }
    }
    write_atomic(&a.out, s.to_jsonl().as_bytes())?;
    println!("train={} valid={} test={}", counts[0], counts[1], counts[2]);
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let arch = architecture(&a.arch)?;
    let config = train_config(&a.optimizer)?;
    let scenario = scenario(&a.scenario)?;
    let mask = parse_mask(&a.mask)?;
    let ds = load_dataset(&a.input)?;
    let pairs = pairs(&ds, &a.models)?;
    let labels = load_labels(&a.labels)?;
    let split = load_split(&a.split)?;
    let tables = load_tables(&a.embeddings)?;
    let train = split.select(&pairs, Split::Train);
    let valid = split.select(&pairs, Split::Valid);

    let raw = raw_stats_map(&train)?;
    let train_raw: Vec<_> = train.iter().map(|p| raw[p.query_id()]).collect();
    let normalizer = features::fit_normalizer(&train_raw)?;
    let tb = bundles(&train, &tables, &normalizer, mask)?;
    let vb = bundles(&valid, &tables, &normalizer, mask)?;
    let tr: Vec<&FeatureBundle> = tb.iter().collect();
    let vr: Vec<&FeatureBundle> = vb.iter().collect();
    let y: Vec<u8> = train
        .iter()
        .map(|p| {
            labels
                .get(p.query_id())
                .copied()
                .ok_or_else(|| CliError::Data(format!("no label for query {}", p.query_id())))
        })
        .collect::<CliResult<_>>()?;
    let dims = InputDims {
        text: tables.text_dim(),
        image: tables.image_dim(),
    };
    let trained = classifier::train(
        &arch,
        dims,
        TrainSet { bundles: &tr, labels: &y },
        ValidSet {
            bundles: &vr,
            pairs: &valid,
        },
        &config,
        &scenario,
        mask,
        normalizer,
    )?;
    for w in &trained.warnings {
        log::warn!("{w}");
    }
    for h in &trained.state.history {
        log::info!("epoch {:>3} loss {:.5} tau {:.2} {} {:.4}", h.epoch, h.loss, h.tau, scenario.name, h.rcs);
    }
    save_state(&trained.state, &a.out)?;
    println!(
        "saved {} router ({} parameters) to {}; tau={:.2}",
        arch.name(),
        trained.state.model.parameter_count(),
        a.out.display(),
        trained.state.tau_or_err()?
    );
    Ok(())
}

/// Bundles for `pairs` built the way `state` was trained.
fn state_bundles(state: &RouterState, pairs: &[PairRecord<'_>], tables: &EmbeddingTables) -> CliResult<Vec<FeatureBundle>> {
    bundles(pairs, tables, &state.normalizer, state.mask)
}

fn calibrate(a: &CalibrateArgs) -> CliResult<()> {
    let scenario = scenario(&a.scenario)?;
    let on = parse_split(&a.on)?;
    let mut state = load_state(&a.model)?;
    let ds = load_dataset(&a.input)?;
    let pairs = pairs(&ds, &a.models)?;
    let split = load_split(&a.split)?;
    let tables = load_tables(&a.embeddings)?;
    let chosen = split.select(&pairs, on);
    let b = state_bundles(&state, &chosen, &tables)?;
    let refs: Vec<&FeatureBundle> = b.iter().collect();
    let (tau, rcs) = state.calibrate(&refs, &chosen, &scenario)?;
    let out = a.out.as_ref().unwrap_or(&a.model);
    save_state(&state, out)?;
    println!("tau={tau:.2} {}={rcs:.4} on {on} ({} queries)", scenario.name, chosen.len());
    Ok(())
}

fn parse_policy(name: &str, seed: u64, state: &mut Option<Arc<RouterState>>, model: &Path) -> CliResult<RoutingPolicy> {
    Ok(match name {
        "router" => {
            if state.is_none() {
                *state = Some(Arc::new(load_state(model)?));
            }
            RoutingPolicy::Router(state.clone().expect("loaded above"))
        }
        "all-large" => RoutingPolicy::AllLarge,
        "all-small" => RoutingPolicy::AllSmall,
        other => {
            let p = other
                .strip_prefix("random:p=")
                .and_then(|p| p.parse::<f64>().ok())
                .ok_or_else(|| usage(format!("unknown policy {other:?} (router|all-large|all-small|random:p=P)")))?;
            let policy = RoutingPolicy::Random { p_edge: p, seed };
            policy.validate().map_err(|e| usage(e.to_string()))?;
            policy
        }
    })
}

fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let on = parse_split(&a.on)?;
    let ds = load_dataset(&a.input)?;
    let pairs = pairs(&ds, &a.models)?;
    let split = load_split(&a.split)?;
    let chosen = split.select(&pairs, on);
    let labels = a.labels.as_deref().map(load_labels).transpose()?;
    let tables = load_tables(&a.embeddings)?;
    let scenarios = ScenarioConfig::presets(a.mes);
    let mut state = None;
    let mut reports: Vec<MetricsReport> = Vec::new();
    for name in &a.policy {
        let policy = parse_policy(name, a.seed, &mut state, &a.model)?;
        let b = match &policy {
            RoutingPolicy::Router(s) => state_bundles(s, &chosen, &tables)?,
            _ => Vec::new(),
        };
        let decisions = route_dataset(&policy, &chosen, &b)?;
        reports.push(compute_metrics(&policy.name(), &decisions, &chosen, labels.as_ref(), a.mes, &scenarios)?);
    }
    let json = serde_json::to_string_pretty(&reports).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic(&a.out, format!("{json}\n").as_bytes())?;
    print!("{}", render_report(&reports, ReportFormat::Csv)?);
    Ok(())
}

fn report(a: &ReportArgs) -> CliResult<()> {
    let format: ReportFormat = a.format.parse().map_err(|e: edgeroute_core::Error| usage(e.to_string()))?;
    let mut reports = Vec::new();
    for path in a.inputs.iter().chain(&a.in_paths) {
        let text = read_to_string(path)?;
        let mut r: Vec<MetricsReport> = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: line {}: {e}", path.display(), e.line())))?;
        reports.append(&mut r);
    }
    let rendered = render_report(&reports, format)?;
    match &a.out {
        Some(out) => write_atomic(out, rendered.as_bytes())?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn sweep(a: &SweepArgs) -> CliResult<()> {
    if !(a.step > 0.0) || a.from > a.to {
        return Err(usage("sweep needs --from <= --to and --step > 0"));
    }
    let steps = ((a.to - a.from) / a.step + 1e-9).floor() as usize;
    let mes_values: Vec<f64> = (0..=steps).map(|i| a.from + i as f64 * a.step).collect();
    ScenarioConfig::preset(&a.scenario, 6.0).ok_or_else(|| usage(format!("unknown scenario {:?}", a.scenario)))?;
    let ds = load_dataset(&a.input)?;
    let pairs = pairs(&ds, &a.models)?;
    let (valid, test) = match &a.split {
        Some(path) => {
            let s = load_split(path)?;
            (s.select(&pairs, Split::Valid), s.select(&pairs, Split::Test))
        }
        None => (pairs.clone(), pairs.clone()),
    };
    let family = |mes| LabelStrategy::Proposed { mes };
    let rows = match &a.model {
        Some(model) => {
            let state = load_state(model)?;
            let tables = load_tables(&a.embeddings)?;
            let vb = state_bundles(&state, &valid, &tables)?;
            let tb = state_bundles(&state, &test, &tables)?;
            let pv = state.model.predict(&vb.iter().collect::<Vec<_>>())?;
            let pt = state.model.predict(&tb.iter().collect::<Vec<_>>())?;
            mes_sweep(&test, family, &mes_values, |mes, _| {
                let sc = ScenarioConfig::preset(&a.scenario, mes).expect("checked above");
                let (tau, rcs) = grid_search_tau(&pv, &valid, &sc)?;
                Ok(SweepPoint {
                    decisions: decisions_at(&pt, &test, tau),
                    tau_star: Some(tau),
                    rcs_star: Some(rcs),
                })
            })?
        }
        None => mes_sweep(&test, family, &mes_values, |_, labels| {
            let probs: Vec<f64> = labels.labels.iter().map(|l| l.label as f64).collect();
            Ok(SweepPoint {
                decisions: decisions_at(&probs, &test, 0.5),
                tau_star: None,
                rcs_star: None,
            })
        })?,
    };
    let rendered = render_sweep(&rows);
    match &a.out {
        Some(out) => write_atomic(out, rendered.as_bytes())?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> CliResult<()> {
    let arch = architecture(&a.arch)?;
    let config = train_config(&a.optimizer)?;
    let scenario = scenario(&a.scenario)?;
    let format: ReportFormat = a.format.parse().map_err(|e: edgeroute_core::Error| usage(e.to_string()))?;
    let masks = a.masks.split(',').map(|m| parse_mask(m.trim())).collect::<CliResult<Vec<_>>>()?;
    let ds = load_dataset(&a.input)?;
    let pairs = pairs(&ds, &a.models)?;
    let labels = load_labels(&a.labels)?;
    let split = load_split(&a.split)?;
    let tables = load_tables(&a.embeddings)?;
    let (train, valid, test) = (
        split.select(&pairs, Split::Train),
        split.select(&pairs, Split::Valid),
        split.select(&pairs, Split::Test),
    );
    let input = AblationInput {
        train: &train,
        valid: &valid,
        test: &test,
        labels: &labels,
        tables: &tables,
    };
    let rows = ablation_run(&input, &masks, &arch, &config, &scenario)?;
    evaluation::emit_report(&rows, &a.out, format)?;
    print!("{}", render_report(&rows, ReportFormat::Csv)?);
    Ok(())
}

fn synth(a: &SynthArgs) -> CliResult<()> {
    let spec: SynthSpec = match &a.spec {
        Some(path) => serde_json::from_str(&read_to_string(path)?)
            .map_err(|e| CliError::Data(format!("{}: line {}: {e}", path.display(), e.line())))?,
        None => SynthSpec::separable(a.n, a.margin, a.seed),
    };
    let data = synthgen::generate(&spec)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Runtime(format!("{}: {e}", a.out_dir.display())))?;
    let rsd = a.out_dir.join("rsd.jsonl");
    Dataset::new(data.records)?.save(&rsd)?;
    if let Some(t) = &data.tables.text {
        features::save_embeddings(t, &a.out_dir.join("text.emb"))?;
    }
    if let Some(t) = &data.tables.image {
        features::save_embeddings(t, &a.out_dir.join("image.emb"))?;
    }
    println!("wrote {} records to {}", spec.n_records, a.out_dir.display());
    Ok(())
}

fn serve(a: &ServeArgs) -> CliResult<()> {
    let mut config = GatewayConfig::load(&a.config)?;
    config.apply_env(|k| std::env::var(k).ok());
    config.validate()?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(edgeroute_gateway::run(config))?;
    Ok(())
}
