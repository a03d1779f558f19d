//! JSON clients for inference and embedding upstreams.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::Upstream;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UpstreamError {
    #[error("timed out")]
    Timeout,
    #[error("{0}")]
    Failed(String),
}

impl UpstreamError {
    fn from_reqwest(e: reqwest::Error) -> Self {
        if e.is_timeout() {
            UpstreamError::Timeout
        } else {
            UpstreamError::Failed(e.to_string())
        }
    }

    /// Short cause tag used in responses and logs.
    pub fn tag(&self) -> &'static str {
        match self {
            UpstreamError::Timeout => "timeout",
            UpstreamError::Failed(_) => "error",
        }
    }
}

#[derive(Debug, Serialize)]
pub struct InferenceRequest<'a> {
    pub query: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_out: Option<u64>,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
pub enum EmbedRequest<'a> {
    Text { text: &'a str },
    Image { image_b64: &'a str },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
}

impl Default for Client {
    fn default() -> Self {
        Self::new()
    }
}

impl Client {
    pub fn new() -> Self {
        Self {
            http: reqwest::Client::new(),
        }
    }

    async fn post<B: Serialize, R: for<'de> Deserialize<'de>>(
        &self,
        upstream: &Upstream,
        body: &B,
    ) -> Result<R, UpstreamError> {
        let resp = self
            .http
            .post(&upstream.url)
            .timeout(upstream.timeout)
            .json(body)
            .send()
            .await
            .map_err(UpstreamError::from_reqwest)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(UpstreamError::Failed(format!("{} returned {status}", upstream.url)));
        }
        resp.json().await.map_err(UpstreamError::from_reqwest)
    }

    /// One inference call. Returns the answer and wall-clock latency.
    pub async fn infer(
        &self,
        upstream: &Upstream,
        query: &str,
        image_b64: Option<&str>,
    ) -> Result<(InferenceResponse, Duration), UpstreamError> {
        let t0 = Instant::now();
        let r = self.post(upstream, &InferenceRequest { query, image_b64 }).await?;
        Ok((r, t0.elapsed()))
    }

    pub async fn embed(&self, upstream: &Upstream, req: EmbedRequest<'_>) -> Result<Vec<f32>, UpstreamError> {
        let r: EmbedResponse = self.post(upstream, &req).await?;
        if r.vector.iter().any(|v| !v.is_finite()) {
            return Err(UpstreamError::Failed("embedding contains non-finite values".into()));
        }
        Ok(r.vector)
    }
}
