use std::future::Future;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use edgeroute_core::evaluation::Side;
use serde::{Deserialize, Serialize};

use crate::config::{Fallback, GatewayConfig, Mode, Upstream};
use crate::engine::{Engine, Prepared, RouteRequest};
use crate::error::GatewayError;
use crate::decision_log::{digest, now_unix, DecisionLog, LogEntry, WriterGuard};
use crate::metrics::{Metrics, Snapshot};
use crate::upstream::{Client, EmbedRequest};

pub const MAX_BODY_BYTES: usize = 32 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecisionResponse {
    pub decision: Side,
    pub p: f64,
    pub tau: f64,
    pub router_overhead_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upstream_latency_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_out: Option<u64>,
    pub degraded: bool,
    /// Set when the chosen upstream failed; names the side and cause.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_checksum: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub uptime_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Inner {
    config: GatewayConfig,
    engine: Result<Engine, String>,
    client: Client,
    metrics: Metrics,
    log: Option<DecisionLog>,
    started: Instant,
}

/// Shared gateway state. Cheap to clone.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

/// A failure together with whether a fallback call was attempted.
struct Failed(GatewayError, bool);

impl From<GatewayError> for Failed {
    fn from(e: GatewayError) -> Self {
        Failed(e, false)
    }
}

impl Gateway {
    /// Validate the config, load the model and open the log. A model that
    /// fails to load leaves the gateway running but not ready.
    pub fn new(config: GatewayConfig) -> Result<(Self, Option<WriterGuard>), GatewayError> {
        config.validate()?;
        let engine = Engine::load(&config.model_path).map_err(|e| e.to_string());
        if let Err(e) = &engine {
            log::error!("model not loaded: {e}");
        }
        Self::with_engine(config, engine)
    }

    pub fn with_engine(
        config: GatewayConfig,
        engine: Result<Engine, String>,
    ) -> Result<(Self, Option<WriterGuard>), GatewayError> {
        let (log, guard) = match &config.log_path {
            Some(path) => {
                let (l, g) = DecisionLog::open(path, config.log_fsync, config.log_queue)?;
                (Some(l), Some(g))
            }
            None => (None, None),
        };
        let inner = Inner {
            config,
            engine,
            client: Client::new(),
            metrics: Metrics::default(),
            log,
            started: Instant::now(),
        };
        Ok((Self { inner: Arc::new(inner) }, guard))
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.inner.config
    }

    pub fn engine(&self) -> Option<&Engine> {
        self.inner.engine.as_ref().ok()
    }

    pub fn metrics(&self) -> Snapshot {
        self.inner.metrics.snapshot()
    }

    pub async fn flush_log(&self) {
        if let Some(l) = &self.inner.log {
            l.flush().await;
        }
    }

    pub fn health(&self) -> (StatusCode, Health) {
        let uptime_s = self.inner.started.elapsed().as_secs_f64();
        match &self.inner.engine {
            Ok(e) => (
                StatusCode::OK,
                Health {
                    status: "ok".into(),
                    model_checksum: Some(format!("{:08x}", e.checksum())),
                    tau: Some(e.tau()),
                    uptime_s,
                    error: None,
                },
            ),
            Err(msg) => (
                StatusCode::SERVICE_UNAVAILABLE,
                Health {
                    status: "not-ready".into(),
                    model_checksum: None,
                    tau: None,
                    uptime_s,
                    error: Some(msg.clone()),
                },
            ),
        }
    }

    pub async fn handle_route(&self, body: &[u8]) -> Result<RouteDecisionResponse, GatewayError> {
        let m = &self.inner.metrics;
        m.begin();
        match self.route(body).await {
            Ok(resp) => {
                m.finish_routed(resp.decision, resp.fallback.is_some());
                Ok(resp)
            }
            Err(Failed(e, fallback)) => {
                m.finish_error(fallback);
                Err(e)
            }
        }
    }

    async fn route(&self, body: &[u8]) -> Result<RouteDecisionResponse, Failed> {
        let t0 = Instant::now();
        let req = RouteRequest::parse(body)?.prepare()?;
        let engine = self
            .inner
            .engine
            .as_ref()
            .map_err(|e| GatewayError::NotReady(e.clone()))?;
        let (text, image) = self.embeddings(engine, &req).await;
        let scored = engine.score(&req, text, image)?;
        let overhead = t0.elapsed().as_secs_f64();
        self.inner.metrics.observe_decision(scored.p, overhead, scored.degraded);

        let mut resp = RouteDecisionResponse {
            decision: scored.decision,
            p: scored.p,
            tau: scored.tau,
            router_overhead_s: overhead,
            upstream_latency_s: None,
            answer: None,
            tokens_out: None,
            degraded: scored.degraded,
            fallback: None,
        };
        if self.inner.config.mode == Mode::Proxy {
            self.dispatch(&req, &mut resp).await?;
        }
        if let Some(l) = &self.inner.log {
            l.append(LogEntry {
                timestamp: now_unix(),
                digest: digest(body),
                decision: resp.decision,
                p: resp.p,
                tau: resp.tau,
                router_overhead_s: resp.router_overhead_s,
                upstream_latency_s: resp.upstream_latency_s,
                degraded: resp.degraded,
                fallback: resp.fallback.clone(),
            })
            .await;
        }
        Ok(resp)
    }

    async fn embeddings(&self, engine: &Engine, req: &Prepared) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
        let cfg = &self.inner.config;
        let client = &self.inner.client;
        let text = async {
            let up = cfg.embed_text.as_ref().filter(|_| engine.wants_text())?;
            fetch(client, up, EmbedRequest::Text { text: &req.text }).await
        };
        let image = async {
            let up = cfg.embed_image.as_ref().filter(|_| engine.wants_image())?;
            let b64 = req.image_b64.as_deref()?;
            fetch(client, up, EmbedRequest::Image { image_b64: b64 }).await
        };
        tokio::join!(text, image)
    }

    fn upstream(&self, side: Side) -> &Upstream {
        let cfg = &self.inner.config;
        match side {
            Side::Edge => cfg.edge.as_ref(),
            Side::Cloud => cfg.cloud.as_ref(),
        }
        .expect("proxy mode has both upstreams")
    }

    /// Call the chosen upstream once; on failure call the fallback side once.
    async fn dispatch(&self, req: &Prepared, resp: &mut RouteDecisionResponse) -> Result<(), Failed> {
        let client = &self.inner.client;
        let image = req.image_b64.as_deref();
        let chosen = resp.decision;
        let t0 = Instant::now();
        let err = match client.infer(self.upstream(chosen), &req.text, image).await {
            Ok((answer, _)) => {
                resp.upstream_latency_s = Some(t0.elapsed().as_secs_f64());
                resp.answer = Some(answer.text);
                resp.tokens_out = answer.tokens_out;
                return Ok(());
            }
            Err(e) => e,
        };
        let cause = format!("{chosen}_{}", err.tag());
        log::warn!("{chosen} upstream failed: {err}");
        let target = match self.inner.config.fallback {
            Fallback::Edge => Some(Side::Edge),
            Fallback::Cloud => Some(Side::Cloud),
            Fallback::Error => None,
        };
        let Some(target) = target.filter(|&t| t != chosen) else {
            return Err(Failed(GatewayError::Upstream(format!("{chosen} upstream: {err}")), false));
        };
        match client.infer(self.upstream(target), &req.text, image).await {
            Ok((answer, _)) => {
                resp.decision = target;
                resp.upstream_latency_s = Some(t0.elapsed().as_secs_f64());
                resp.answer = Some(answer.text);
                resp.tokens_out = answer.tokens_out;
                resp.fallback = Some(cause);
                Ok(())
            }
            Err(e2) => Err(Failed(
                GatewayError::Upstream(format!("{chosen} upstream: {err}; fallback {target}: {e2}")),
                true,
            )),
        }
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/v1/route", post(route_handler))
            .route("/healthz", get(health_handler))
            .route("/metrics", get(metrics_handler))
            .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
            .with_state(self.clone())
    }

    pub async fn serve(
        self,
        listener: tokio::net::TcpListener,
        shutdown: impl Future<Output = ()> + Send + 'static,
    ) -> std::io::Result<()> {
        axum::serve(listener, self.router())
            .with_graceful_shutdown(shutdown)
            .await
    }
}

async fn fetch(client: &Client, up: &Upstream, req: EmbedRequest<'_>) -> Option<Vec<f32>> {
    match client.embed(up, req).await {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("embed upstream {}: {e}", up.url);
            None
        }
    }
}

async fn route_handler(State(gw): State<Gateway>, body: Bytes) -> Response {
    match gw.handle_route(&body).await {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn health_handler(State(gw): State<Gateway>) -> Response {
    let (status, h) = gw.health();
    (status, Json(h)).into_response()
}

async fn metrics_handler(State(gw): State<Gateway>) -> String {
    gw.metrics().render()
}

/// Bind the configured address and serve until Ctrl-C.
pub async fn run(config: GatewayConfig) -> Result<(), GatewayError> {
    let listen = config.listen;
    let (gw, guard) = Gateway::new(config)?;
    let listener = tokio::net::TcpListener::bind(listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
        log::info!("shutting down");
    };
    gw.serve(listener, shutdown).await?;
    if let Some(g) = guard {
        tokio::task::spawn_blocking(move || g.join())
            .await
            .map_err(|e| GatewayError::Io(std::io::Error::other(e)))?;
    }
    Ok(())
}
