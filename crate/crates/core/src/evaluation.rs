//! Routing policies, scenario metrics, threshold calibration, MES sweeps,
//! modality ablations and report emission.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, Architecture, InputDims, RouterState, TrainConfig, TrainSet, ValidSet};
use crate::error::{Error, Result};
use crate::features::{self, EmbeddingTables, FeatureBundle, ModalityMask, STATS_DIM};
use crate::labeling::{label_dataset, LabelSet, LabelStrategy};
use crate::rsd::{PairRecord, ScenarioConfig};

/// Number of points in the threshold grid (`0.00, 0.05, ..., 1.00`).
pub const TAU_GRID_POINTS: usize = 21;

/// The threshold grid, ascending.
pub fn tau_grid() -> [f64; TAU_GRID_POINTS] {
    std::array::from_fn(|i| i as f64 / 20.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Edge,
    Cloud,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Edge => "edge",
            Side::Cloud => "cloud",
        })
    }
}

/// Threshold rule: edge iff `p >= tau`.
pub fn decide(p: f64, tau: f64) -> Side {
    if p >= tau {
        Side::Edge
    } else {
        Side::Cloud
    }
}

#[derive(Debug, Clone)]
pub enum RoutingPolicy {
    Router(Arc<RouterState>),
    AllLarge,
    AllSmall,
    Random { p_edge: f64, seed: u64 },
}

impl RoutingPolicy {
    pub fn name(&self) -> String {
        match self {
            RoutingPolicy::Router(_) => "router".into(),
            RoutingPolicy::AllLarge => "all-large".into(),
            RoutingPolicy::AllSmall => "all-small".into(),
            RoutingPolicy::Random { p_edge, .. } => format!("random:p={p_edge}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RoutingPolicy::Random { p_edge, .. } if !(0.0..=1.0).contains(p_edge) => {
                Err(Error::Range(format!("random policy p_edge {p_edge} outside [0,1]")))
            }
            RoutingPolicy::Router(s) => s.tau_or_err().map(|_| ()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub query_id: String,
    pub chosen: Side,
    pub p: Option<f64>,
    pub realized_score: f64,
    pub realized_latency: f64,
}

impl Decision {
    fn new(pair: &PairRecord<'_>, chosen: Side, p: Option<f64>) -> Self {
        let o = match chosen {
            Side::Edge => pair.edge,
            Side::Cloud => pair.cloud,
        };
        Self {
            query_id: pair.query_id().to_owned(),
            chosen,
            p,
            realized_score: o.score,
            realized_latency: o.latency,
        }
    }
}

/// Bundles in pair order; errors list every query without a bundle.
pub fn align_bundles<'b>(pairs: &[PairRecord<'_>], bundles: &'b [FeatureBundle]) -> Result<Vec<&'b FeatureBundle>> {
    let index: HashMap<&str, &FeatureBundle> = bundles.iter().map(|b| (b.query_id.as_str(), b)).collect();
    let mut missing = Vec::new();
    let aligned: Vec<&FeatureBundle> = pairs
        .iter()
        .filter_map(|p| {
            let b = index.get(p.query_id()).copied();
            if b.is_none() {
                missing.push(p.query_id().to_owned());
            }
            b
        })
        .collect();
    if !missing.is_empty() {
        let shown: Vec<_> = missing.iter().take(20).map(String::as_str).collect();
        return Err(Error::invalid(format!(
            "missing feature bundles for {} queries: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > shown.len() { ", ..." } else { "" }
        )));
    }
    Ok(aligned)
}

/// Decisions for fixed probabilities and threshold.
pub fn decisions_at(probs: &[f64], pairs: &[PairRecord<'_>], tau: f64) -> Vec<Decision> {
    pairs
        .iter()
        .zip(probs)
        .map(|(pair, &p)| Decision::new(pair, decide(p, tau), Some(p)))
        .collect()
}

pub fn route_dataset(
    policy: &RoutingPolicy,
    pairs: &[PairRecord<'_>],
    bundles: &[FeatureBundle],
) -> Result<Vec<Decision>> {
    policy.validate()?;
    Ok(match policy {
        RoutingPolicy::Router(state) => {
            let aligned = align_bundles(pairs, bundles)?;
            let probs = state.model.predict(&aligned)?;
            decisions_at(&probs, pairs, state.tau_or_err()?)
        }
        RoutingPolicy::AllLarge => pairs.iter().map(|p| Decision::new(p, Side::Cloud, None)).collect(),
        RoutingPolicy::AllSmall => pairs.iter().map(|p| Decision::new(p, Side::Edge, None)).collect(),
        RoutingPolicy::Random { p_edge, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            pairs
                .iter()
                .map(|p| {
                    let side = if rng.random::<f64>() < *p_edge {
                        Side::Edge
                    } else {
                        Side::Cloud
                    };
                    Decision::new(p, side, None)
                })
                .collect()
        }
    })
}

/// `alpha * apsp + beta * ca - gamma * ail`.
pub fn rcs_combine(apsp: f64, ca: f64, ail: f64, weights: (f64, f64, f64)) -> f64 {
    let (alpha, beta, gamma) = weights;
    alpha * apsp + beta * ca - gamma * ail
}

/// `(router - small) / (large - small)`; `None` when the denominator is 0.
pub fn pgr(router: f64, small: f64, large: f64) -> Option<f64> {
    let denom = large - small;
    (denom != 0.0).then(|| (router - small) / denom)
}

/// Cloud-minus-edge token and latency sums over edge-routed records. Token
/// saving is `None` when any edge-routed record lacks a token count.
pub fn savings(decisions: &[Decision], pairs: &[PairRecord<'_>]) -> Result<(Option<i64>, f64)> {
    let index: HashMap<&str, &PairRecord<'_>> = pairs.iter().map(|p| (p.query_id(), p)).collect();
    let mut tokens = Some(0i64);
    let mut time = 0.0;
    for d in decisions.iter().filter(|d| d.chosen == Side::Edge) {
        let pair = index
            .get(d.query_id.as_str())
            .ok_or_else(|| Error::invalid(format!("decision for unknown query {}", d.query_id)))?;
        tokens = match (tokens, pair.cloud.tokens_out, pair.edge.tokens_out) {
            (Some(t), Some(c), Some(e)) => Some(t + c as i64 - e as i64),
            _ => None,
        };
        time += pair.cloud.latency - pair.edge.latency;
    }
    Ok((tokens, time))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub apsp: f64,
    pub ca: f64,
    pub ail: f64,
    /// RCS per scenario, keyed by scenario name.
    pub rcs: Vec<(String, f64)>,
    pub acc: Option<f64>,
    pub pgr: Option<f64>,
    pub token_saving: Option<i64>,
    pub time_saving: Option<f64>,
    pub n: usize,
}

impl MetricsReport {
    pub fn rcs_for(&self, scenario: &str) -> Option<f64> {
        self.rcs.iter().find(|(n, _)| n == scenario).map(|(_, v)| *v)
    }
}

/// APSP, CA and AIL of a decision list.
pub fn core_metrics(decisions: &[Decision], mes: f64) -> Result<(f64, f64, f64)> {
    if decisions.is_empty() {
        return Err(Error::invalid("no decisions to evaluate"));
    }
    let n = decisions.len() as f64;
    let mut hits = 0usize;
    let mut edge = 0usize;
    let mut latency = 0.0;
    for d in decisions {
        hits += (d.realized_score >= mes) as usize;
        edge += (d.chosen == Side::Edge) as usize;
        latency += d.realized_latency;
    }
    Ok((hits as f64 / n, edge as f64 / n, latency / n))
}

pub fn compute_metrics(
    policy: &str,
    decisions: &[Decision],
    pairs: &[PairRecord<'_>],
    labels: Option<&HashMap<String, u8>>,
    mes: f64,
    scenarios: &[ScenarioConfig],
) -> Result<MetricsReport> {
    let (apsp, ca, ail) = core_metrics(decisions, mes)?;
    let n = decisions.len();
    let acc = labels
        .map(|labels| {
            let mut correct = 0usize;
            for d in decisions {
                let l = labels
                    .get(&d.query_id)
                    .ok_or_else(|| Error::invalid(format!("no label for query {}", d.query_id)))?;
                correct += ((d.chosen == Side::Edge) == (*l == 1)) as usize;
            }
            Ok::<_, Error>(correct as f64 / n as f64)
        })
        .transpose()?;
    let (quality_small, quality_large) = if pairs.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let m = pairs.len() as f64;
        (
            pairs.iter().map(|p| p.edge.score).sum::<f64>() / m,
            pairs.iter().map(|p| p.cloud.score).sum::<f64>() / m,
        )
    };
    let quality_router = decisions.iter().map(|d| d.realized_score).sum::<f64>() / n as f64;
    let pgr = pgr(quality_router, quality_small, quality_large).filter(|v| v.is_finite());
    let (token_saving, time_saving) = savings(decisions, pairs)?;
    Ok(MetricsReport {
        policy: policy.to_owned(),
        apsp,
        ca,
        ail,
        rcs: scenarios
            .iter()
            .map(|s| (s.name.clone(), rcs_combine(apsp, ca, ail, s.weights())))
            .collect(),
        acc,
        pgr,
        token_saving,
        time_saving: Some(time_saving),
        n,
    })
}

/// Best `(tau, rcs)` over the 21-point grid; ties go to the larger tau.
pub fn grid_search_tau(probs: &[f64], pairs: &[PairRecord<'_>], scenario: &ScenarioConfig) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::invalid("threshold search needs a non-empty validation set"));
    }
    if probs.len() != pairs.len() {
        return Err(Error::invalid(format!(
            "{} probabilities for {} records",
            probs.len(),
            pairs.len()
        )));
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite()) {
        return Err(Error::invalid(format!("non-finite probability {p}")));
    }
    let n = pairs.len() as f64;
    let weights = scenario.weights();
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for tau in tau_grid() {
        let mut hits = 0usize;
        let mut edge = 0usize;
        let mut latency = 0.0;
        for (pair, &p) in pairs.iter().zip(probs) {
            let o = if p >= tau {
                edge += 1;
                pair.edge
            } else {
                pair.cloud
            };
            hits += (o.score >= scenario.mes) as usize;
            latency += o.latency;
        }
        let rcs = rcs_combine(hits as f64 / n, edge as f64 / n, latency / n, weights);
        if rcs >= best.1 {
            best = (tau, rcs);
        }
    }
    Ok(best)
}

/// Fraction of records where neither model reaches `mes`.
pub fn failure_rate(pairs: &[PairRecord<'_>], mes: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|p| p.edge.score.max(p.cloud.score) < mes).count() as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mes: f64,
    pub failure_rate: f64,
    pub ca: f64,
    pub apsp: f64,
    pub tau_star: Option<f64>,
    pub rcs_star: Option<f64>,
}

/// What a policy builder hands back for one MES value.
pub struct SweepPoint {
    pub decisions: Vec<Decision>,
    pub tau_star: Option<f64>,
    pub rcs_star: Option<f64>,
}

/// Re-label with `family(mes)` and re-build the policy at every MES value.
pub fn mes_sweep<F>(
    pairs: &[PairRecord<'_>],
    family: impl Fn(f64) -> LabelStrategy,
    mes_values: &[f64],
    mut build: F,
) -> Result<Vec<SweepRow>>
where
    F: FnMut(f64, &LabelSet) -> Result<SweepPoint>,
{
    if mes_values.is_empty() {
        return Err(Error::invalid("MES sweep needs at least one value"));
    }
    let mut rows = Vec::with_capacity(mes_values.len());
    for &mes in mes_values {
        if !(1.0..=10.0).contains(&mes) {
            return Err(Error::Range(format!("MES {mes} outside [1,10]")));
        }
        let labels = label_dataset(pairs, family(mes))?;
        let point = build(mes, &labels)?;
        let (apsp, ca, _) = core_metrics(&point.decisions, mes)?;
        rows.push(SweepRow {
            mes,
            failure_rate: failure_rate(pairs, mes),
            ca,
            apsp,
            tau_star: point.tau_star,
            rcs_star: point.rcs_star,
        });
    }
    Ok(rows)
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from("mes,failure_rate,ca,apsp,tau_star,rcs_star\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{},{}\n",
            r.mes,
            r.failure_rate,
            r.ca,
            r.apsp,
            opt4(r.tau_star),
            opt4(r.rcs_star)
        ));
    }
    out
}

/// Standardized feature bundles for `pairs` under `mask`.
pub fn build_bundles(
    pairs: &[PairRecord<'_>],
    raw: &HashMap<String, [f64; STATS_DIM]>,
    tables: &EmbeddingTables,
    normalizer: &features::Normalizer,
    mask: ModalityMask,
) -> Result<(Vec<FeatureBundle>, features::AssemblyReport)> {
    let mut report = features::AssemblyReport::default();
    let bundles = pairs
        .iter()
        .map(|p| {
            let r = raw
                .get(p.query_id())
                .ok_or_else(|| Error::invalid(format!("no statistics for query {}", p.query_id())))?;
            Ok(features::assemble_from_parts(
                p.query_id(),
                p.record.has_image(),
                r,
                tables,
                normalizer,
                mask,
                &mut report,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((bundles, report))
}

/// Raw statistics per query.
pub fn raw_stats_map(pairs: &[PairRecord<'_>]) -> Result<HashMap<String, [f64; STATS_DIM]>> {
    pairs
        .iter()
        .map(|p| Ok((p.query_id().to_owned(), features::record_raw_stats(p.record)?)))
        .collect()
}

pub struct AblationInput<'a, 'r> {
    pub train: &'a [PairRecord<'r>],
    pub valid: &'a [PairRecord<'r>],
    pub test: &'a [PairRecord<'r>],
    pub labels: &'a HashMap<String, u8>,
    pub tables: &'a EmbeddingTables,
}

/// Train and evaluate one router per mask, then the three baselines.
pub fn ablation_run(
    input: &AblationInput<'_, '_>,
    masks: &[ModalityMask],
    arch: &Architecture,
    config: &TrainConfig,
    scenario: &ScenarioConfig,
) -> Result<Vec<MetricsReport>> {
    if masks.is_empty() {
        return Err(Error::invalid("ablation needs at least one mask"));
    }
    let all: Vec<PairRecord<'_>> = input
        .train
        .iter()
        .chain(input.valid)
        .chain(input.test)
        .copied()
        .collect();
    let raw = raw_stats_map(&all)?;
    let train_raw: Vec<[f64; STATS_DIM]> = input.train.iter().map(|p| raw[p.query_id()]).collect();
    let normalizer = features::fit_normalizer(&train_raw)?;
    let dims = InputDims {
        text: input.tables.text_dim(),
        image: input.tables.image_dim(),
    };
    let scenarios = ScenarioConfig::presets(scenario.mes);
    let train_labels: Vec<u8> = input
        .train
        .iter()
        .map(|p| {
            input
                .labels
                .get(p.query_id())
                .copied()
                .ok_or_else(|| Error::invalid(format!("no label for query {}", p.query_id())))
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<MetricsReport> = masks
        .par_iter()
        .map(|&mask| {
            let (train_b, _) = build_bundles(input.train, &raw, input.tables, &normalizer, mask)?;
            let (valid_b, _) = build_bundles(input.valid, &raw, input.tables, &normalizer, mask)?;
            let (test_b, _) = build_bundles(input.test, &raw, input.tables, &normalizer, mask)?;
            let train_refs: Vec<&FeatureBundle> = train_b.iter().collect();
            let valid_refs: Vec<&FeatureBundle> = valid_b.iter().collect();
            let trained = classifier::train(
                arch,
                dims,
                TrainSet {
                    bundles: &train_refs,
                    labels: &train_labels,
                },
                ValidSet {
                    bundles: &valid_refs,
                    pairs: input.valid,
                },
                config,
                scenario,
                mask,
                normalizer.clone(),
            )?;
            let policy = RoutingPolicy::Router(Arc::new(trained.state));
            let decisions = route_dataset(&policy, input.test, &test_b)?;
            compute_metrics(
                &format!("router[{}]", mask.code()),
                &decisions,
                input.test,
                Some(input.labels),
                scenario.mes,
                &scenarios,
            )
        })
        .collect::<Result<_>>()?;

    for policy in [
        RoutingPolicy::Random {
            p_edge: 0.5,
            seed: config.seed,
        },
        RoutingPolicy::AllLarge,
        RoutingPolicy::AllSmall,
    ] {
        let decisions = route_dataset(&policy, input.test, &[])?;
        rows.push(compute_metrics(
            &policy.name(),
            &decisions,
            input.test,
            Some(input.labels),
            scenario.mes,
            &scenarios,
        )?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::invalid(format!("unknown report format {s:?} (csv|json)"))),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "policy",
    "apsp",
    "ca",
    "ail_s",
    "rcs1",
    "rcs2",
    "rcs3",
    "acc",
    "pgr",
    "token_saving",
    "time_saving",
    "n",
];

fn opt4(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

fn report_cells(r: &MetricsReport) -> [String; 12] {
    [
        r.policy.clone(),
        format!("{:.4}", r.apsp),
        format!("{:.4}", r.ca),
        format!("{:.4}", r.ail),
        opt4(r.rcs_for("rcs1")),
        opt4(r.rcs_for("rcs2")),
        opt4(r.rcs_for("rcs3")),
        opt4(r.acc),
        opt4(r.pgr),
        r.token_saving.map(|t| t.to_string()).unwrap_or_default(),
        opt4(r.time_saving),
        r.n.to_string(),
    ]
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn render_report(reports: &[MetricsReport], format: ReportFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to emit"));
    }
    Ok(match format {
        ReportFormat::Csv => {
            let mut out = REPORT_COLUMNS.join(",");
            out.push('\n');
            for r in reports {
                let cells: Vec<String> = report_cells(r).iter().map(|c| csv_field(c)).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            out
        }
        ReportFormat::Json => {
            let rows: Vec<serde_json::Value> = reports
                .iter()
                .map(|r| {
                    let cells = report_cells(r);
                    let mut obj = serde_json::Map::new();
                    for (i, (col, cell)) in REPORT_COLUMNS.iter().zip(cells).enumerate() {
                        let v = if i == 0 {
                            serde_json::Value::String(cell)
                        } else if cell.is_empty() {
                            serde_json::Value::Null
                        } else {
                            serde_json::from_str(&cell).expect("formatted number parses")
                        };
                        obj.insert((*col).to_owned(), v);
                    }
                    serde_json::Value::Object(obj)
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&rows).expect("serializable");
            s.push('\n');
            s
        }
    })
}

pub fn emit_report(reports: &[MetricsReport], path: &Path, format: ReportFormat) -> Result<()> {
    crate::fsutil::write_atomic(path, render_report(reports, format)?.as_bytes())
}
