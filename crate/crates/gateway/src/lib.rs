//! HTTP gateway that serves live routing decisions.
//!
//! `POST /v1/route` assembles features for one query, runs the calibrated
//! router and, in proxy mode, forwards the query to the edge or cloud
//! upstream. `GET /healthz` and `GET /metrics` report readiness and counters.
//! Every decision is appended to a JSONL log that [`decision_log::replay`] can read back.

pub mod config;
pub mod decision_log;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod server;
pub mod upstream;

pub use config::{Fallback, FsyncPolicy, GatewayConfig, Mode, Upstream};
pub use engine::{Engine, RouteRequest};
pub use error::GatewayError;
pub use server::{run, Gateway, Health, RouteDecisionResponse};
