//! Per-query router inputs.
//!
//! Text and image embeddings come from external encoders through embedding
//! files; the seven statistics features are computed here. A modality whose
//! mask bit is 0 reaches the classifier as a zero vector.

use std::collections::HashMap;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rsd::{ImageMeta, ResponseRecord};

pub const STATS_DIM: usize = 7;
pub const EMBEDDING_MAGIC: &[u8; 8] = b"ECVLEMB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TextStats {
    pub word_count: usize,
    pub special_char_count: usize,
    pub numeric_token_count: usize,
    pub char_count: usize,
}

fn is_numeric_token(tok: &str) -> bool {
    let mut digits = 0;
    let mut dots = 0;
    for c in tok.chars() {
        if c.is_ascii_digit() {
            digits += 1;
        } else if c == '.' {
            dots += 1;
        } else {
            return false;
        }
    }
    digits > 0 && dots <= 1
}

pub fn text_stats(text: &str) -> TextStats {
    let mut s = TextStats::default();
    for tok in text.split_whitespace() {
        s.word_count += 1;
        if is_numeric_token(tok) {
            s.numeric_token_count += 1;
        }
    }
    for c in text.chars() {
        s.char_count += 1;
        if !c.is_alphanumeric() && !c.is_whitespace() {
            s.special_char_count += 1;
        }
    }
    s
}

/// Statistics are computed over the query and any accompanying input text.
pub fn record_text(record: &ResponseRecord) -> String {
    if record.input_text.is_empty() {
        record.query_text.clone()
    } else {
        format!("{}\n{}", record.query_text, record.input_text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ImageStats {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub present: bool,
}

impl ImageStats {
    pub const ABSENT: ImageStats = ImageStats {
        width: 0,
        height: 0,
        channels: 0,
        present: false,
    };

    pub fn from_meta(meta: ImageMeta) -> Self {
        Self {
            width: meta.width,
            height: meta.height,
            channels: meta.channels,
            present: true,
        }
    }
}

fn channels_of(color: image::ColorType) -> u8 {
    use image::ColorType::*;
    match color {
        L8 | L16 | La8 | La16 => 1,
        Rgba8 | Rgba16 | Rgba32F => 4,
        _ => 3,
    }
}

fn probe_reader<R: std::io::BufRead + std::io::Seek>(
    reader: image::ImageReader<R>,
    what: &Path,
) -> Result<ImageStats> {
    use image::ImageDecoder;
    let err = |m: String| Error::Image {
        path: what.to_path_buf(),
        message: m,
    };
    let reader = reader.with_guessed_format().map_err(|e| err(e.to_string()))?;
    let decoder = reader.into_decoder().map_err(|e| err(e.to_string()))?;
    let (width, height) = decoder.dimensions();
    let channels = channels_of(decoder.color_type());
    if width == 0 || height == 0 {
        return Err(err("zero-sized image".into()));
    }
    Ok(ImageStats {
        width,
        height,
        channels,
        present: true,
    })
}

/// Read dimensions and channel layout from a PNG/JPEG file header.
pub fn image_stats_from_path(path: &Path) -> Result<ImageStats> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    probe_reader(reader, path)
}

pub fn image_stats_from_bytes(bytes: &[u8]) -> Result<ImageStats> {
    probe_reader(image::ImageReader::new(Cursor::new(bytes)), Path::new("<inline image>"))
}

/// Metadata wins over the path when both are present.
pub fn image_stats(record: &ResponseRecord) -> Result<ImageStats> {
    match (&record.image, &record.image_path) {
        (Some(meta), _) => Ok(ImageStats::from_meta(*meta)),
        (None, Some(path)) => image_stats_from_path(Path::new(path)),
        (None, None) => Ok(ImageStats::ABSENT),
    }
}

/// Raw (unstandardized) statistics vector:
/// `[words, special chars, numeric tokens, chars, width, height, channels]`.
pub fn raw_stats(text: &TextStats, image: &ImageStats) -> [f64; STATS_DIM] {
    [
        text.word_count as f64,
        text.special_char_count as f64,
        text.numeric_token_count as f64,
        text.char_count as f64,
        image.width as f64,
        image.height as f64,
        image.channels as f64,
    ]
}

pub fn record_raw_stats(record: &ResponseRecord) -> Result<[f64; STATS_DIM]> {
    Ok(raw_stats(&text_stats(&record_text(record)), &image_stats(record)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    fn tag(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Modality::Text),
            1 => Ok(Modality::Image),
            other => Err(Error::invalid(format!("unknown modality byte {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub modality: Modality,
    pub dim: usize,
    pub rows: HashMap<String, Vec<f32>>,
    /// Insertion order, kept so that saving is deterministic.
    pub order: Vec<String>,
}

impl EmbeddingTable {
    pub fn new(modality: Modality, dim: usize) -> Self {
        Self {
            modality,
            dim,
            rows: HashMap::new(),
            order: Vec::new(),
        }
    }

    pub fn insert(&mut self, query_id: String, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Dimension(format!(
                "row {query_id} has {} values, table dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if let Some(bad) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at index {bad} in row {query_id}")));
        }
        if self.rows.contains_key(&query_id) {
            return Err(Error::invalid(format!("duplicate query_id {query_id} in embedding table")));
        }
        self.order.push(query_id.clone());
        self.rows.insert(query_id, vector);
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Option<&[f32]> {
        self.rows.get(query_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + self.len() * (2 + 16 + 4 * self.dim));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.push(self.modality.tag());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for id in &self.order {
            let bytes = id.as_bytes();
            out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(bytes);
            for v in &self.rows[id] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.first() == Some(&b'{') {
            return Self::from_jsonl(std::str::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))?);
        }
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        read_exact(&mut cur, &mut magic)?;
        if &magic != EMBEDDING_MAGIC {
            return Err(Error::invalid("not an embedding file (bad magic)"));
        }
        let mut b1 = [0u8; 1];
        read_exact(&mut cur, &mut b1)?;
        let modality = Modality::from_tag(b1[0])?;
        let mut b4 = [0u8; 4];
        read_exact(&mut cur, &mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        let mut b8 = [0u8; 8];
        read_exact(&mut cur, &mut b8)?;
        let n = u64::from_le_bytes(b8);
        let mut table = Self::new(modality, dim);
        let mut b2 = [0u8; 2];
        for _ in 0..n {
            read_exact(&mut cur, &mut b2)?;
            let mut id = vec![0u8; u16::from_le_bytes(b2) as usize];
            read_exact(&mut cur, &mut id)?;
            let id = String::from_utf8(id).map_err(|e| Error::invalid(format!("query_id is not UTF-8: {e}")))?;
            let mut raw = vec![0u8; 4 * dim];
            read_exact(&mut cur, &mut raw)?;
            let vector = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            table.insert(id, vector)?;
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(Error::invalid("trailing bytes after the declared rows"));
        }
        Ok(table)
    }

    /// JSONL form: one `{"query_id", "vector"}` object per line. A line
    /// without `query_id` is a metadata row and may name the modality.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            query_id: Option<String>,
            vector: Option<Vec<f64>>,
            modality: Option<Modality>,
        }
        let mut modality = Modality::Text;
        let mut table: Option<Self> = None;
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Row =
                serde_json::from_str(line).map_err(|e| Error::record(e.to_string()).at_line(idx + 1))?;
            let (Some(id), Some(vector)) = (row.query_id, row.vector) else {
                if let Some(m) = row.modality {
                    modality = m;
                    if let Some(t) = table.as_mut() {
                        t.modality = m;
                    }
                }
                continue;
            };
            let t = table.get_or_insert_with(|| Self::new(modality, vector.len()));
            let vector: Vec<f32> = vector.into_iter().map(|v| v as f32).collect();
            t.insert(id, vector).map_err(|e| match e {
                Error::InvalidInput(m) | Error::Dimension(m) => Error::record(m).at_line(idx + 1),
                other => other,
            })?;
        }
        table.ok_or_else(|| Error::invalid("embedding file contains no rows"))
    }
}

fn read_exact(cur: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf)
        .map_err(|_| Error::invalid("embedding file is truncated"))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::from_bytes(&bytes).map_err(|e| match e {
        Error::InvalidInput(m) => Error::InvalidInput(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    table.save(path)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTables {
    pub text: Option<EmbeddingTable>,
    pub image: Option<EmbeddingTable>,
}

impl EmbeddingTables {
    pub fn text_dim(&self) -> usize {
        self.text.as_ref().map_or(0, |t| t.dim)
    }

    pub fn image_dim(&self) -> usize {
        self.image.as_ref().map_or(0, |t| t.dim)
    }
}

/// Which modalities feed the router.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask {
    pub text: bool,
    pub image: bool,
    pub stats: bool,
}

impl ModalityMask {
    pub const ALL: ModalityMask = ModalityMask {
        text: true,
        image: true,
        stats: true,
    };

    pub fn new(text: bool, image: bool, stats: bool) -> Self {
        Self { text, image, stats }
    }

    /// Three-letter `t`/`f` code, e.g. `ttf`.
    pub fn code(&self) -> String {
        [self.text, self.image, self.stats]
            .iter()
            .map(|&b| if b { 't' } else { 'f' })
            .collect()
    }

    pub fn parse(code: &str) -> Result<Self> {
        let bits: Vec<bool> = code
            .chars()
            .map(|c| match c {
                't' | '1' => Ok(true),
                'f' | '0' => Ok(false),
                _ => Err(Error::invalid(format!("bad mask {code:?}: expected three of t/f"))),
            })
            .collect::<Result<_>>()?;
        match bits.as_slice() {
            [t, i, s] => Ok(Self::new(*t, *i, *s)),
            _ => Err(Error::invalid(format!("bad mask {code:?}: expected three of t/f"))),
        }
    }

    pub fn bits(&self) -> u8 {
        (self.text as u8) | (self.image as u8) << 1 | (self.stats as u8) << 2
    }

    pub fn from_bits(b: u8) -> Self {
        Self::new(b & 1 != 0, b & 2 != 0, b & 4 != 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: [f64; STATS_DIM],
    pub std: [f64; STATS_DIM],
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; STATS_DIM],
            std: [1.0; STATS_DIM],
        }
    }

    pub fn transform(&self, raw: &[f64; STATS_DIM]) -> [f64; STATS_DIM] {
        std::array::from_fn(|i| (raw[i] - self.mean[i]) / self.std[i])
    }

    pub fn inverse(&self, z: &[f64; STATS_DIM]) -> [f64; STATS_DIM] {
        std::array::from_fn(|i| z[i] * self.std[i] + self.mean[i])
    }
}

/// Population mean/std per dimension; zero-variance dimensions get std 1.
pub fn fit_normalizer(rows: &[[f64; STATS_DIM]]) -> Result<Normalizer> {
    if rows.len() < 2 {
        return Err(Error::invalid(format!(
            "fitting a normalizer needs at least 2 records, got {}",
            rows.len()
        )));
    }
    let n = rows.len() as f64;
    let mut mean = [0.0; STATS_DIM];
    for r in rows {
        for i in 0..STATS_DIM {
            mean[i] += r[i];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = [0.0; STATS_DIM];
    for r in rows {
        for i in 0..STATS_DIM {
            let d = r[i] - mean[i];
            std[i] += d * d;
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    Ok(Normalizer { mean, std })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub query_id: String,
    pub text: Option<Vec<f32>>,
    pub image: Option<Vec<f32>>,
    /// Standardized statistics.
    pub stats: [f32; STATS_DIM],
    pub mask: ModalityMask,
}

impl FeatureBundle {
    /// The embedding that actually reaches the model for a slot, or `None`
    /// when the slot is masked out (treated as zeros).
    pub fn effective_text(&self) -> Option<&[f32]> {
        self.text.as_deref().filter(|_| self.mask.text)
    }

    pub fn effective_image(&self) -> Option<&[f32]> {
        self.image.as_deref().filter(|_| self.mask.image)
    }

    pub fn effective_stats(&self) -> Option<&[f32; STATS_DIM]> {
        self.mask.stats.then_some(&self.stats)
    }
}

/// Counters for embeddings that were requested by the mask but unavailable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AssemblyReport {
    pub bundles: usize,
    pub missing_text: usize,
    pub missing_image: usize,
}

impl AssemblyReport {
    pub fn missing_rate(&self) -> f64 {
        if self.bundles == 0 {
            0.0
        } else {
            (self.missing_text + self.missing_image) as f64 / (2 * self.bundles) as f64
        }
    }
}

/// Assemble from precomputed raw statistics. Missing embeddings turn the
/// corresponding mask bit off instead of failing.
pub fn assemble_from_parts(
    query_id: &str,
    has_image: bool,
    raw: &[f64; STATS_DIM],
    tables: &EmbeddingTables,
    normalizer: &Normalizer,
    mask: ModalityMask,
    report: &mut AssemblyReport,
) -> FeatureBundle {
    report.bundles += 1;
    let mut eff = mask;
    let text = if mask.text {
        let v = tables.text.as_ref().and_then(|t| t.get(query_id)).map(<[f32]>::to_vec);
        if v.is_none() {
            eff.text = false;
            report.missing_text += 1;
        }
        v
    } else {
        None
    };
    let image = if mask.image && has_image {
        let v = tables.image.as_ref().and_then(|t| t.get(query_id)).map(<[f32]>::to_vec);
        if v.is_none() {
            eff.image = false;
            report.missing_image += 1;
        }
        v
    } else {
        eff.image = false;
        None
    };
    let z = normalizer.transform(raw);
    FeatureBundle {
        query_id: query_id.to_owned(),
        text,
        image,
        stats: z.map(|v| v as f32),
        mask: eff,
    }
}

pub fn assemble(
    record: &ResponseRecord,
    tables: &EmbeddingTables,
    normalizer: &Normalizer,
    mask: ModalityMask,
    report: &mut AssemblyReport,
) -> Result<FeatureBundle> {
    let raw = record_raw_stats(record)?;
    Ok(assemble_from_parts(
        &record.query_id,
        record.has_image(),
        &raw,
        tables,
        normalizer,
        mask,
        report,
    ))
}
