use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::Deserialize;

use crate::error::GatewayError;

pub const ENV_CONFIG: &str = "ECVL_CONFIG";
pub const ENV_MODEL: &str = "ECVL_MODEL";

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_EDGE_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_CLOUD_TIMEOUT_MS: u64 = 60_000;
pub const DEFAULT_EMBED_TIMEOUT_MS: u64 = 2_000;
pub const DEFAULT_LOG_QUEUE: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Proxy,
    DryRun,
}

/// Where a request goes when its chosen upstream fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    #[default]
    Edge,
    Cloud,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FsyncPolicy {
    #[default]
    Never,
    Always,
    /// fsync after every `n` lines.
    Every(u32),
}

impl FromStr for FsyncPolicy {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "never" => Ok(Self::Never),
            "always" => Ok(Self::Always),
            other => other
                .strip_prefix("every:")
                .and_then(|n| n.parse::<u32>().ok())
                .filter(|&n| n > 0)
                .map(Self::Every)
                .ok_or_else(|| GatewayError::Config(format!("log_fsync must be never|always|every:N, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Upstream {
    pub url: String,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    pub model_path: PathBuf,
    pub mode: Mode,
    pub fallback: Fallback,
    pub log_path: Option<PathBuf>,
    pub log_fsync: FsyncPolicy,
    pub log_queue: usize,
    pub edge: Option<Upstream>,
    pub cloud: Option<Upstream>,
    pub embed_text: Option<Upstream>,
    pub embed_image: Option<Upstream>,
}

/// On-disk layout: one flat table.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    listen: Option<String>,
    model_path: Option<PathBuf>,
    mode: Option<Mode>,
    fallback: Option<Fallback>,
    log_path: Option<PathBuf>,
    log_fsync: Option<String>,
    log_queue: Option<usize>,
    edge_url: Option<String>,
    edge_timeout_ms: Option<u64>,
    cloud_url: Option<String>,
    cloud_timeout_ms: Option<u64>,
    embed_text_url: Option<String>,
    embed_image_url: Option<String>,
    embed_timeout_ms: Option<u64>,
}

fn upstream(url: Option<String>, timeout_ms: Option<u64>, default_ms: u64, key: &str) -> Result<Option<Upstream>, GatewayError> {
    let ms = timeout_ms.unwrap_or(default_ms);
    if ms == 0 {
        return Err(GatewayError::Config(format!("{key}_timeout_ms must be > 0")));
    }
    Ok(url.map(|url| Upstream {
        url,
        timeout: Duration::from_millis(ms),
    }))
}

impl GatewayConfig {
    /// Dry-run config with no upstreams and no log.
    pub fn dry_run(model_path: impl Into<PathBuf>) -> Self {
        Self {
            listen: DEFAULT_LISTEN.parse().unwrap(),
            model_path: model_path.into(),
            mode: Mode::DryRun,
            fallback: Fallback::Edge,
            log_path: None,
            log_fsync: FsyncPolicy::Never,
            log_queue: DEFAULT_LOG_QUEUE,
            edge: None,
            cloud: None,
            embed_text: None,
            embed_image: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, GatewayError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))?;
        let listen = raw.listen.as_deref().unwrap_or(DEFAULT_LISTEN);
        let listen = listen
            .parse()
            .map_err(|_| GatewayError::Config(format!("listen is not a socket address: {listen:?}")))?;
        let log_fsync = raw.log_fsync.as_deref().map(str::parse).transpose()?.unwrap_or_default();
        let embed_ms = raw.embed_timeout_ms;
        let config = Self {
            listen,
            model_path: raw.model_path.unwrap_or_default(),
            mode: raw.mode.unwrap_or(Mode::Proxy),
            fallback: raw.fallback.unwrap_or_default(),
            log_path: raw.log_path,
            log_fsync,
            log_queue: raw.log_queue.unwrap_or(DEFAULT_LOG_QUEUE),
            edge: upstream(raw.edge_url, raw.edge_timeout_ms, DEFAULT_EDGE_TIMEOUT_MS, "edge")?,
            cloud: upstream(raw.cloud_url, raw.cloud_timeout_ms, DEFAULT_CLOUD_TIMEOUT_MS, "cloud")?,
            embed_text: upstream(raw.embed_text_url, embed_ms, DEFAULT_EMBED_TIMEOUT_MS, "embed")?,
            embed_image: upstream(raw.embed_image_url, embed_ms, DEFAULT_EMBED_TIMEOUT_MS, "embed")?,
        };
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Apply `ECVL_MODEL` (or any other lookup, for tests).
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(model) = get(ENV_MODEL).filter(|s| !s.is_empty()) {
            self.model_path = PathBuf::from(model);
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model_path.as_os_str().is_empty() {
            return Err(GatewayError::Config("model_path is required".into()));
        }
        if self.log_queue == 0 {
            return Err(GatewayError::Config("log_queue must be > 0".into()));
        }
        let all = [&self.edge, &self.cloud, &self.embed_text, &self.embed_image];
        if all.iter().flat_map(|u| u.iter()).any(|u| u.timeout.is_zero()) {
            return Err(GatewayError::Config("upstream timeouts must be > 0".into()));
        }
        if self.mode == Mode::Proxy && (self.edge.is_none() || self.cloud.is_none()) {
            return Err(GatewayError::Config("proxy mode needs both edge_url and cloud_url".into()));
        }
        Ok(())
    }
}
