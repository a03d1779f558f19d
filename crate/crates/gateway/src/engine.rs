//! Request validation, serving-time feature assembly and the threshold decision.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use edgeroute_core::classifier::io::{model_checksum, state_from_bytes, state_to_bytes};
use edgeroute_core::classifier::RouterState;
use edgeroute_core::evaluation::{decide, Side};
use edgeroute_core::features::{self, FeatureBundle, ImageStats, STATS_DIM};
use edgeroute_core::rsd::ImageMeta;
use serde::Deserialize;

use crate::error::GatewayError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteRequest {
    pub query_text: String,
    #[serde(default)]
    pub input_text: Option<String>,
    #[serde(default)]
    pub image_b64: Option<String>,
    #[serde(default)]
    pub image: Option<ImageMeta>,
    /// Per-request threshold in `[0, 1]`.
    #[serde(default, alias = "tau")]
    pub scenario_override: Option<f64>,
}

/// A validated request with its text joined and image statistics resolved.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub text: String,
    pub image_b64: Option<String>,
    pub has_image: bool,
    pub raw_stats: [f64; STATS_DIM],
    pub tau_override: Option<f64>,
}

impl RouteRequest {
    pub fn parse(body: &[u8]) -> Result<Self, GatewayError> {
        serde_json::from_slice(body).map_err(|e| GatewayError::BadRequest(e.to_string()))
    }

    pub fn prepare(self) -> Result<Prepared, GatewayError> {
        let bad = |m: String| GatewayError::BadRequest(m);
        if self.query_text.trim().is_empty() {
            return Err(bad("query_text must be non-empty".into()));
        }
        if let Some(t) = self.scenario_override {
            if !(0.0..=1.0).contains(&t) {
                return Err(bad(format!("scenario_override {t} outside [0, 1]")));
            }
        }
        let image = match (&self.image_b64, self.image) {
            (Some(_), Some(_)) => return Err(bad("give either image_b64 or image metadata, not both".into())),
            (Some(b64), None) => {
                let bytes = BASE64.decode(b64).map_err(|e| bad(format!("image_b64: {e}")))?;
                features::image_stats_from_bytes(&bytes).map_err(|e| bad(e.to_string()))?
            }
            (None, Some(meta)) => {
                if meta.width == 0 || meta.height == 0 || meta.channels == 0 {
                    return Err(bad("image metadata must be non-zero".into()));
                }
                ImageStats::from_meta(meta)
            }
            (None, None) => ImageStats::ABSENT,
        };
        let text = match self.input_text.as_deref() {
            Some(input) if !input.is_empty() => format!("{}\n{}", self.query_text, input),
            _ => self.query_text,
        };
        let raw_stats = features::raw_stats(&features::text_stats(&text), &image);
        Ok(Prepared {
            text,
            image_b64: self.image_b64,
            has_image: image.present,
            raw_stats,
            tau_override: self.scenario_override,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub p: f64,
    pub tau: f64,
    pub decision: Side,
    /// A modality the model was trained on had no embedding for this request.
    pub degraded: bool,
}

/// A calibrated router ready to serve.
#[derive(Debug)]
pub struct Engine {
    state: RouterState,
    tau: f64,
    checksum: u32,
}

impl Engine {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let bytes = std::fs::read(path)
            .map_err(|e| GatewayError::NotReady(format!("cannot read {}: {e}", path.display())))?;
        let checksum = model_checksum(&bytes)?;
        Self::with_checksum(state_from_bytes(&bytes)?, checksum)
    }

    pub fn from_state(state: RouterState) -> Result<Self, GatewayError> {
        let checksum = model_checksum(&state_to_bytes(&state))?;
        Self::with_checksum(state, checksum)
    }

    fn with_checksum(state: RouterState, checksum: u32) -> Result<Self, GatewayError> {
        let tau = state.tau_or_err()?;
        Ok(Self { state, tau, checksum })
    }

    pub fn state(&self) -> &RouterState {
        &self.state
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn checksum(&self) -> u32 {
        self.checksum
    }

    pub fn wants_text(&self) -> bool {
        self.state.mask.text && self.state.model.dims.text > 0
    }

    pub fn wants_image(&self) -> bool {
        self.state.mask.image && self.state.model.dims.image > 0
    }

    /// Embeddings of the wrong width count as unavailable.
    pub fn score(
        &self,
        req: &Prepared,
        text: Option<Vec<f32>>,
        image: Option<Vec<f32>>,
    ) -> Result<Scored, GatewayError> {
        let dims = self.state.model.dims;
        let text = text.filter(|v| self.wants_text() && v.len() == dims.text);
        let image = image.filter(|v| self.wants_image() && req.has_image && v.len() == dims.image);
        let degraded = (self.wants_text() && text.is_none()) || (self.wants_image() && req.has_image && image.is_none());
        let mut mask = self.state.mask;
        mask.text &= text.is_some();
        mask.image &= image.is_some();
        let bundle = FeatureBundle {
            query_id: String::new(),
            text,
            image,
            stats: self.state.normalizer.transform(&req.raw_stats).map(|v| v as f32),
            mask,
        };
        let p = self.state.model.forward(&bundle)?;
        let tau = req.tau_override.unwrap_or(self.tau);
        Ok(Scored {
            p,
            tau,
            decision: decide(p, tau),
            degraded,
        })
    }
}
