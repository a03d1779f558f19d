//! Response-Score-Dataset records: parsing, validation, pair views and
//! stratified splitting.
//!
//! One JSONL line holds one query together with the quality score and
//! latency of every model that answered it, so any (edge, cloud) pair can be
//! derived from a single file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutcome {
    pub model_name: String,
    pub score: f64,
    /// Seconds.
    pub latency: f64,
    pub tokens_out: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseRecord {
    pub query_id: String,
    pub source_dataset: String,
    pub query_text: String,
    pub input_text: String,
    pub image: Option<ImageMeta>,
    /// Optional on-disk location of the image, used for pixel-free metadata
    /// probing when the dimensions are not recorded.
    pub image_path: Option<String>,
    pub outcomes: BTreeMap<String, ModelOutcome>,
}

impl ResponseRecord {
    pub fn outcome(&self, model: &str) -> Option<&ModelOutcome> {
        self.outcomes.get(model)
    }

    pub fn has_image(&self) -> bool {
        self.image.is_some() || self.image_path.is_some()
    }
}

// Wire schema.

#[derive(Serialize, Deserialize)]
struct WireOutcome {
    score: f64,
    latency_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens_out: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct WireImage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    query_id: String,
    source_dataset: String,
    query_text: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    input_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<WireImage>,
    outcomes: BTreeMap<String, WireOutcome>,
}

fn extract_query_id(line: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    v.get("query_id")?.as_str().map(str::to_owned)
}

fn validate_image_meta(meta: &ImageMeta) -> std::result::Result<(), String> {
    if meta.width == 0 || meta.height == 0 {
        return Err(format!(
            "image dimensions must be positive, got {}x{}",
            meta.width, meta.height
        ));
    }
    if !matches!(meta.channels, 1 | 3 | 4) {
        return Err(format!("image channels must be 1, 3 or 4, got {}", meta.channels));
    }
    Ok(())
}

/// Parse one JSONL line. Out-of-range scores and negative latencies are
/// rejected; nothing is clamped.
pub fn parse_record(line: &str) -> Result<ResponseRecord> {
    let wire: WireRecord = serde_json::from_str(line).map_err(|e| Error::Record {
        line: None,
        query_id: extract_query_id(line),
        message: e.to_string(),
    })?;
    let qid = wire.query_id;
    let fail = |message: String| Error::Record {
        line: None,
        query_id: Some(qid.clone()),
        message,
    };
    if qid.is_empty() {
        return Err(Error::record("query_id must be non-empty"));
    }
    if wire.outcomes.is_empty() {
        return Err(fail("outcomes must contain at least one model".into()));
    }
    let mut outcomes = BTreeMap::new();
    for (name, o) in wire.outcomes {
        if name.is_empty() {
            return Err(fail("model name must be non-empty".into()));
        }
        if !o.score.is_finite() || !(MIN_SCORE..=MAX_SCORE).contains(&o.score) {
            return Err(fail(format!(
                "score out of range for model {name}: {} not in [1, 10]",
                o.score
            )));
        }
        if !o.latency_s.is_finite() || o.latency_s < 0.0 {
            return Err(fail(format!(
                "negative or non-finite latency for model {name}: {}",
                o.latency_s
            )));
        }
        outcomes.insert(
            name.clone(),
            ModelOutcome {
                model_name: name,
                score: o.score,
                latency: o.latency_s,
                tokens_out: o.tokens_out,
            },
        );
    }
    let (image, image_path) = match wire.image {
        None => (None, None),
        Some(img) => {
            let meta = match (img.width, img.height, img.channels) {
                (Some(width), Some(height), Some(channels)) => {
                    let meta = ImageMeta {
                        width,
                        height,
                        channels,
                    };
                    validate_image_meta(&meta).map_err(&fail)?;
                    Some(meta)
                }
                (None, None, None) => None,
                _ => {
                    return Err(fail(
                        "image requires all of width, height, channels (or none with a path)".into(),
                    ))
                }
            };
            if meta.is_none() && img.path.is_none() {
                return Err(fail("image object carries neither dimensions nor a path".into()));
            }
            (meta, img.path)
        }
    };
    Ok(ResponseRecord {
        query_id: qid,
        source_dataset: wire.source_dataset,
        query_text: wire.query_text,
        input_text: wire.input_text,
        image,
        image_path,
        outcomes,
    })
}

/// Serialize a record back into its JSONL form (no trailing newline).
pub fn serialize_record(record: &ResponseRecord) -> String {
    let image = if record.image.is_some() || record.image_path.is_some() {
        Some(WireImage {
            width: record.image.map(|m| m.width),
            height: record.image.map(|m| m.height),
            channels: record.image.map(|m| m.channels),
            path: record.image_path.clone(),
        })
    } else {
        None
    };
    let wire = WireRecord {
        query_id: record.query_id.clone(),
        source_dataset: record.source_dataset.clone(),
        query_text: record.query_text.clone(),
        input_text: record.input_text.clone(),
        image,
        outcomes: record
            .outcomes
            .iter()
            .map(|(k, o)| {
                (
                    k.clone(),
                    WireOutcome {
                        score: o.score,
                        latency_s: o.latency,
                        tokens_out: o.tokens_out,
                    },
                )
            })
            .collect(),
    };
    serde_json::to_string(&wire).expect("record serialization cannot fail")
}

/// A validated set of records with unique query ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<ResponseRecord>,
}

impl Dataset {
    pub fn new(records: Vec<ResponseRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.query_id.as_str()) {
                return Err(Error::Record {
                    line: None,
                    query_id: Some(r.query_id.clone()),
                    message: "duplicate query_id".into(),
                });
            }
        }
        Ok(Self { records })
    }

    /// Read a JSONL stream. Blank lines are skipped; errors carry the 1-based
    /// line number.
    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::Record {
                line: Some(line_no),
                query_id: None,
                message: format!("unreadable line: {e}"),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = parse_record(&line).map_err(|e| e.at_line(line_no))?;
            if !seen.insert(rec.query_id.clone()) {
                return Err(Error::Record {
                    line: Some(line_no),
                    query_id: Some(rec.query_id),
                    message: "duplicate query_id".into(),
                });
            }
            records.push(rec);
        }
        Ok(Self { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serialize_record(r));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Count of records per model name.
    pub fn model_counts(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            for name in r.outcomes.keys() {
                *m.entry(name.as_str()).or_insert(0) += 1;
            }
        }
        m
    }

    pub fn source_counts(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.source_dataset.as_str()).or_insert(0) += 1;
        }
        m
    }
}

/// One record viewed through a specific (edge, cloud) model pair.
#[derive(Debug, Clone, Copy)]
pub struct PairRecord<'a> {
    pub record: &'a ResponseRecord,
    pub edge: &'a ModelOutcome,
    pub cloud: &'a ModelOutcome,
}

impl PairRecord<'_> {
    pub fn query_id(&self) -> &str {
        &self.record.query_id
    }
}

#[derive(Debug, Clone)]
pub struct PairView<'a> {
    pub pairs: Vec<PairRecord<'a>>,
    /// Records lacking one or both of the requested outcomes.
    pub skipped: usize,
}

pub fn pair_view<'a>(dataset: &'a Dataset, edge_name: &str, cloud_name: &str) -> Result<PairView<'a>> {
    if edge_name == cloud_name {
        return Err(Error::invalid(format!("pair must be distinct: edge and cloud are both {edge_name}")));
    }
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for record in &dataset.records {
        match (record.outcome(edge_name), record.outcome(cloud_name)) {
            (Some(edge), Some(cloud)) => pairs.push(PairRecord { record, edge, cloud }),
            _ => skipped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid(format!(
            "no matching records containing both edge model {edge_name} and cloud model {cloud_name}"
        )));
    }
    Ok(PairView { pairs, skipped })
}

/// A user scenario: quality floor plus RCS weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub mes: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Per second.
    pub gamma: f64,
}

pub const DEFAULT_MES: f64 = 6.0;

impl ScenarioConfig {
    pub fn new(name: impl Into<String>, mes: f64, alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let s = Self {
            name: name.into(),
            mes,
            alpha,
            beta,
            gamma,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_SCORE..=MAX_SCORE).contains(&self.mes) {
            return Err(Error::Range(format!("mes {} not in [1, 10]", self.mes)));
        }
        for (n, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Range(format!("{n} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    /// Quality-priority weights (1.2, 0.1, 0.001).
    pub fn rcs1(mes: f64) -> Self {
        Self {
            name: "rcs1".into(),
            mes,
            alpha: 1.2,
            beta: 0.1,
            gamma: 0.001,
        }
    }

    /// Efficiency-priority weights (1.0, 0.12, 0.001).
    pub fn rcs2(mes: f64) -> Self {
        Self {
            name: "rcs2".into(),
            mes,
            alpha: 1.0,
            beta: 0.12,
            gamma: 0.001,
        }
    }

    /// Speed-priority weights (1.0, 0.1, 0.0015).
    pub fn rcs3(mes: f64) -> Self {
        Self {
            name: "rcs3".into(),
            mes,
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.0015,
        }
    }

    pub fn presets(mes: f64) -> [Self; 3] {
        [Self::rcs1(mes), Self::rcs2(mes), Self::rcs3(mes)]
    }

    pub fn preset(name: &str, mes: f64) -> Option<Self> {
        match name {
            "rcs1" => Some(Self::rcs1(mes)),
            "rcs2" => Some(Self::rcs2(mes)),
            "rcs3" => Some(Self::rcs3(mes)),
            _ => None,
        }
    }

    pub fn weights(&self) -> (f64, f64, f64) {
        (self.alpha, self.beta, self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct WireSplit {
    query_id: String,
    split: Split,
}

impl SplitAssignment {
    pub fn get(&self, query_id: &str) -> Option<Split> {
        self.assignment.get(query_id).copied()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in self.assignment.values() {
            c[s.index()] += 1;
        }
        c
    }

    /// Select the pairs assigned to `split`, preserving input order.
    pub fn select<'a>(&self, pairs: &[PairRecord<'a>], split: Split) -> Vec<PairRecord<'a>> {
        pairs
            .iter()
            .filter(|p| self.get(p.query_id()) == Some(split))
            .copied()
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (qid, split) in &self.assignment {
            let line = serde_json::to_string(&WireSplit {
                query_id: qid.clone(),
                split: *split,
            })
            .expect("split serialization cannot fail");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    /// Parse a split file. Ratios and seed are not part of the file format
    /// and are reconstructed from the realized counts (seed = 0).
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut assignment = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let w: WireSplit = serde_json::from_str(line)
                .map_err(|e| Error::record(e.to_string()).at_line(idx + 1))?;
            if assignment.insert(w.query_id.clone(), w.split).is_some() {
                return Err(Error::Record {
                    line: Some(idx + 1),
                    query_id: Some(w.query_id),
                    message: "query_id assigned twice".into(),
                });
            }
        }
        let mut s = Self {
            assignment,
            ratios: [0.0; 3],
            seed: 0,
        };
        let c = s.counts();
        let n = c.iter().sum::<usize>().max(1) as f64;
        s.ratios = [c[0] as f64 / n, c[1] as f64 / n, c[2] as f64 / n];
        Ok(s)
    }
}

/// Per-split counts for a stratum of `n` records: floor of each share, with
/// the remainder handed to the largest fractional parts (ties to the earlier
/// split). Every count is within one record of `ratio * n`.
pub(crate) fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor().max(0.0) as usize;
    }
    let mut assigned: usize = counts.iter().sum();
    // Floating error can push a floor past n.
    while assigned > n {
        let i = (0..3).rev().find(|&i| counts[i] > 0).expect("positive count");
        counts[i] -= 1;
        assigned -= 1;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut k = 0;
    while assigned < n {
        let i = order[k % 3];
        if ratios[i] > 0.0 {
            counts[i] += 1;
            assigned += 1;
        }
        k += 1;
    }
    counts
}

/// Split pairs into train/valid/test, preserving the distribution of
/// (source_dataset, label) strata.
pub fn stratified_split(
    pairs: &[PairRecord<'_>],
    labels: &HashMap<String, u8>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::invalid(format!("split ratios must be non-negative, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios must sum to 1, got {total}")));
    }
    let mut strata: BTreeMap<(&str, u8), Vec<&str>> = BTreeMap::new();
    for p in pairs {
        let label = *labels
            .get(p.query_id())
            .ok_or_else(|| Error::invalid(format!("no label for query {}", p.query_id())))?;
        strata
            .entry((p.record.source_dataset.as_str(), label))
            .or_default()
            .push(p.query_id());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    for members in strata.values_mut() {
        // Canonical order first, so the permutation depends on the seed only.
        members.sort_unstable();
        members.shuffle(&mut rng);
        let [n_train, n_valid, _] = apportion(members.len(), ratios);
        for (i, qid) in members.iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
            assignment.insert((*qid).to_owned(), split);
        }
    }
    Ok(SplitAssignment {
        assignment,
        ratios,
        seed,
    })
}
