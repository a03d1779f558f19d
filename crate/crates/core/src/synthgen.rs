//! Deterministic synthetic response-score datasets with a planted routing
//! signal, plus brute-force oracles for cross-checking.
//!
//! Records are generated in partitions of [`PARTITION`] ids. Partition `k`
//! draws from ChaCha8 stream `k + 1` keyed on the seed; the per-modality
//! signal directions come from stream 0. Output therefore does not depend on
//! how partitions are scheduled.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{EmbeddingTable, EmbeddingTables, Modality};
use crate::rsd::{ImageMeta, ModelOutcome, PairRecord, ResponseRecord, ScenarioConfig};

pub const PARTITION: usize = 1024;
pub const EDGE_MODEL: &str = "edge-sim";
pub const CLOUD_MODEL: &str = "cloud-sim";
const SOURCES: [&str; 2] = ["synth-a", "synth-b"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Signal {
    /// Features carry the label with margin `margin` along a fixed direction.
    Separable { margin: f64 },
    /// As separable, but features follow a label flipped with `p_flip`.
    Noisy { margin: f64, p_flip: f64 },
    /// Features independent of the label.
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub edge_mean: f64,
    pub edge_std: f64,
    pub cloud_mean: f64,
    pub cloud_std: f64,
    /// Guarantee `cloud.latency >= edge.latency` on every record.
    pub cloud_slower: bool,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            edge_mean: 0.9,
            edge_std: 0.3,
            cloud_mean: 4.5,
            cloud_std: 1.5,
            cloud_slower: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreModel {
    /// MES the planted labels are defined against.
    pub mes: f64,
    /// Fraction of records where both models score below `mes`.
    pub case_b_fraction: f64,
    /// Fraction of non-band records that are edge-competent.
    pub positive_rate: f64,
}

impl Default for ScoreModel {
    fn default() -> Self {
        Self {
            mes: 6.0,
            case_b_fraction: 0.1,
            positive_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_records: usize,
    #[serde(default = "default_k_text")]
    pub k_text: usize,
    #[serde(default = "default_k_image")]
    pub k_image: usize,
    pub signal: Signal,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default)]
    pub score: ScoreModel,
    #[serde(default)]
    pub seed: u64,
}

fn default_k_text() -> usize {
    16
}

fn default_k_image() -> usize {
    8
}

impl SynthSpec {
    pub fn separable(n_records: usize, margin: f64, seed: u64) -> Self {
        Self {
            n_records,
            k_text: default_k_text(),
            k_image: default_k_image(),
            signal: Signal::Separable { margin },
            latency: LatencyModel::default(),
            score: ScoreModel::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_records == 0 {
            return Err(Error::invalid("synthetic spec needs n_records >= 1"));
        }
        if self.k_text == 0 || self.k_image == 0 {
            return Err(Error::invalid("synthetic embedding dims must be >= 1"));
        }
        match self.signal {
            Signal::Separable { margin } | Signal::Noisy { margin, .. } if !(margin >= 0.0 && margin.is_finite()) => {
                return Err(Error::Range(format!("margin {margin} must be finite and >= 0")));
            }
            Signal::Noisy { p_flip, .. } if !(0.0..=0.5).contains(&p_flip) => {
                return Err(Error::Range(format!("p_flip {p_flip} outside [0, 0.5]")));
            }
            _ => {}
        }
        let l = &self.latency;
        for v in [l.edge_mean, l.edge_std, l.cloud_mean, l.cloud_std] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Range(format!("latency parameter {v} must be finite and >= 0")));
            }
        }
        let s = &self.score;
        if !(1.0..=10.0).contains(&s.mes) {
            return Err(Error::Range(format!("MES {} outside [1,10]", s.mes)));
        }
        for (name, v) in [("case_b_fraction", s.case_b_fraction), ("positive_rate", s.positive_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Range(format!("{name} {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub records: Vec<ResponseRecord>,
    pub tables: EmbeddingTables,
    /// Planted difficulty in [0,1] per record, in record order.
    pub difficulty: Vec<f64>,
    /// Label under the proposed rule at the spec's MES, in record order.
    pub planted: Vec<u8>,
}

struct Row {
    record: ResponseRecord,
    text: Vec<f32>,
    image: Vec<f32>,
    difficulty: f64,
    label: u8,
}

fn unit_vector(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    loop {
        let v: Vec<f64> = (0..k).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `side * (margin/2 + |eps|) * u` plus isotropic noise orthogonal to `u`.
fn planted_vector(rng: &mut ChaCha8Rng, u: &[f64], side: f64, margin: f64) -> Vec<f32> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut noise: Vec<f64> = (0..u.len()).map(|_| normal.sample(rng)).collect();
    let along: f64 = noise.iter().zip(u).map(|(a, b)| a * b).sum();
    for (n, ui) in noise.iter_mut().zip(u) {
        *n -= along * ui;
    }
    let eps: f64 = normal.sample(rng) * (0.1 * margin + 0.05);
    let t = side * (margin / 2.0 + eps.abs());
    noise.iter().zip(u).map(|(n, ui)| (t * ui + n) as f32).collect()
}

fn draw_int(rng: &mut ChaCha8Rng, lo: i64, hi: i64, difficulty: f64) -> f64 {
    // Harder records sit toward the low end of the allowed band.
    let span = (hi - lo) as f64;
    let jitter = rng.random::<f64>() - 0.5;
    let v = lo as f64 + ((1.0 - difficulty) * span + jitter).round();
    v.clamp(lo as f64, hi as f64)
}

fn latency(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let v = mean + std * normal.sample(rng);
    // Rounded to microseconds so JSON round-trips are exact.
    (v.max(0.01) * 1e6).round() / 1e6
}

fn words(rng: &mut ChaCha8Rng, n: usize, numeric_every: usize) -> String {
    const VOCAB: [&str; 12] = [
        "what", "is", "shown", "in", "the", "image", "describe", "chart", "value", "left", "region", "count",
    ];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if numeric_every > 0 && i % numeric_every == numeric_every - 1 {
            out.push(rng.random_range(0..1000u32).to_string());
        } else {
            out.push(VOCAB[rng.random_range(0..VOCAB.len())].to_owned());
        }
    }
    let mut s = out.join(" ");
    s.push('?');
    s
}

fn generate_row(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    id: usize,
    u_text: &[f64],
    u_image: &[f64],
) -> Row {
    let mes_i = spec.score.mes.ceil() as i64;
    let difficulty: f64 = rng.random();
    let band_possible = mes_i >= 2;
    let case_b = band_possible && rng.random::<f64>() < spec.score.case_b_fraction;
    let positive = rng.random::<f64>() < spec.score.positive_rate;
    let (edge_score, cloud_score, label) = if case_b {
        let cloud = draw_int(rng, 1, mes_i - 1, difficulty);
        let edge = draw_int(rng, 1, cloud as i64, difficulty);
        (edge, cloud, 1u8)
    } else if positive || !band_possible {
        let cloud = draw_int(rng, mes_i.max(1), 10, difficulty * 0.5);
        let edge = draw_int(rng, mes_i.max(1), 10, difficulty);
        (edge, cloud, 1)
    } else {
        let cloud = draw_int(rng, mes_i, 10, difficulty * 0.5);
        let edge = draw_int(rng, 1, mes_i - 1, difficulty);
        (edge, cloud, 0)
    };

    let feature_label = match spec.signal {
        Signal::Separable { .. } => Some(label),
        Signal::Noisy { p_flip, .. } => Some(if rng.random::<f64>() < p_flip { 1 - label } else { label }),
        Signal::Adversarial => None,
    };
    let margin = match spec.signal {
        Signal::Separable { margin } | Signal::Noisy { margin, .. } => margin,
        Signal::Adversarial => 1.0,
    };
    let side = match feature_label {
        Some(1) => 1.0,
        Some(_) => -1.0,
        None => {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
    };
    let text = planted_vector(rng, u_text, side, margin);
    let image = planted_vector(rng, u_image, side, margin);

    // Short prompts and small images for edge-competent queries.
    let easy = side > 0.0;
    let n_words = if easy {
        rng.random_range(4..12)
    } else {
        rng.random_range(20..36)
    };
    let query_text = words(rng, n_words, if easy { 0 } else { 5 });
    let input_text = if rng.random::<f64>() < 0.3 {
        let n = rng.random_range(2..6);
        words(rng, n, 0)
    } else {
        String::new()
    };
    let (w, h) = if easy {
        (rng.random_range(200..480u32), rng.random_range(200..480u32))
    } else {
        (rng.random_range(800..1600u32), rng.random_range(600..1200u32))
    };
    let channels = if rng.random::<f64>() < 0.9 { 3 } else { 1 };

    let mut edge_latency = latency(rng, spec.latency.edge_mean, spec.latency.edge_std);
    let mut cloud_latency = latency(rng, spec.latency.cloud_mean, spec.latency.cloud_std);
    if spec.latency.cloud_slower && cloud_latency < edge_latency {
        std::mem::swap(&mut edge_latency, &mut cloud_latency);
    }
    let edge_tokens = rng.random_range(20..200u64);
    let cloud_tokens = edge_tokens + rng.random_range(0..300u64);
    let source = SOURCES[rng.random_range(0..SOURCES.len())];

    let mut outcomes = BTreeMap::new();
    outcomes.insert(
        EDGE_MODEL.to_owned(),
        ModelOutcome {
            model_name: EDGE_MODEL.to_owned(),
            score: edge_score,
            latency: edge_latency,
            tokens_out: Some(edge_tokens),
        },
    );
    outcomes.insert(
        CLOUD_MODEL.to_owned(),
        ModelOutcome {
            model_name: CLOUD_MODEL.to_owned(),
            score: cloud_score,
            latency: cloud_latency,
            tokens_out: Some(cloud_tokens),
        },
    );
    Row {
        record: ResponseRecord {
            query_id: format!("syn-{id:06}"),
            source_dataset: source.to_owned(),
            query_text,
            input_text,
            image: Some(ImageMeta {
                width: w,
                height: h,
                channels,
            }),
            image_path: None,
            outcomes,
        },
        text,
        image,
        difficulty,
        label,
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut dir_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let u_text = unit_vector(&mut dir_rng, spec.k_text);
    let u_image = unit_vector(&mut dir_rng, spec.k_image);

    let partitions = spec.n_records.div_ceil(PARTITION);
    let rows: Vec<Vec<Row>> = (0..partitions)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(k as u64 + 1);
            let start = k * PARTITION;
            let end = (start + PARTITION).min(spec.n_records);
            (start..end)
                .map(|id| generate_row(spec, &mut rng, id, &u_text, &u_image))
                .collect()
        })
        .collect();

    let mut text = EmbeddingTable::new(Modality::Text, spec.k_text);
    let mut image = EmbeddingTable::new(Modality::Image, spec.k_image);
    let mut records = Vec::with_capacity(spec.n_records);
    let mut difficulty = Vec::with_capacity(spec.n_records);
    let mut planted = Vec::with_capacity(spec.n_records);
    for row in rows.into_iter().flatten() {
        text.insert(row.record.query_id.clone(), row.text)?;
        image.insert(row.record.query_id.clone(), row.image)?;
        difficulty.push(row.difficulty);
        planted.push(row.label);
        records.push(row.record);
    }
    Ok(SynthData {
        records,
        tables: EmbeddingTables {
            text: Some(text),
            image: Some(image),
        },
        difficulty,
        planted,
    })
}

/// Exhaustive threshold search over an arbitrary grid, written independently
/// of the evaluation module. Ties resolve to the larger threshold.
pub fn oracle_best_tau(
    p: &[f64],
    pairs: &[PairRecord<'_>],
    scenario: &ScenarioConfig,
    grid: &[f64],
) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::invalid("oracle grid is empty"));
    }
    if pairs.is_empty() || p.len() != pairs.len() {
        return Err(Error::invalid("oracle needs aligned, non-empty inputs"));
    }
    let n = pairs.len() as f64;
    let mut best: Option<(f64, f64)> = None;
    for &tau in grid {
        let routed: Vec<(bool, &ModelOutcome)> = pairs
            .iter()
            .zip(p)
            .map(|(pair, &pi)| {
                let to_edge = !(pi < tau);
                (to_edge, if to_edge { pair.edge } else { pair.cloud })
            })
            .collect();
        let apsp = routed.iter().filter(|(_, o)| o.score >= scenario.mes).count() as f64 / n;
        let ca = routed.iter().filter(|(e, _)| *e).count() as f64 / n;
        let ail = routed.iter().map(|(_, o)| o.latency).sum::<f64>() / n;
        let rcs = scenario.alpha * apsp + scenario.beta * ca - scenario.gamma * ail;
        best = match best {
            Some((bt, br)) if br > rcs || (br == rcs && bt > tau) => Some((bt, br)),
            _ => Some((tau, rcs)),
        };
    }
    Ok(best.expect("non-empty grid"))
}
