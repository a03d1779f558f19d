//! Append-only JSONL decision log with a single writer thread, plus replay.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use edgeroute_core::evaluation::{core_metrics, Decision, Side};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::{mpsc, oneshot};

use crate::config::FsyncPolicy;
use crate::error::GatewayError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    /// SHA-256 of the request body, hex.
    pub digest: String,
    pub decision: Side,
    pub p: f64,
    pub tau: f64,
    pub router_overhead_s: f64,
    pub upstream_latency_s: Option<f64>,
    pub degraded: bool,
    pub fallback: Option<String>,
}

pub fn digest(body: &[u8]) -> String {
    hex::encode(Sha256::digest(body))
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

enum Msg {
    Entry(Box<LogEntry>),
    Flush(oneshot::Sender<()>),
}

/// Cloneable handle; the file closes when the last handle is dropped.
#[derive(Clone)]
pub struct DecisionLog {
    tx: mpsc::Sender<Msg>,
}

pub struct WriterGuard {
    thread: Option<JoinHandle<()>>,
}

impl DecisionLog {
    pub fn open(path: &Path, fsync: FsyncPolicy, queue: usize) -> Result<(Self, WriterGuard), GatewayError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let (tx, rx) = mpsc::channel(queue.max(1));
        let path = path.to_path_buf();
        let thread = std::thread::Builder::new()
            .name("decision-log".into())
            .spawn(move || writer(file, path, fsync, rx))?;
        Ok((Self { tx }, WriterGuard { thread: Some(thread) }))
    }

    /// Waits for queue space; never drops entries.
    pub async fn append(&self, entry: LogEntry) {
        if self.tx.send(Msg::Entry(Box::new(entry))).await.is_err() {
            log::error!("decision log writer has stopped; entry lost");
        }
    }

    /// Resolves once every entry sent before this call is on disk (flushed).
    pub async fn flush(&self) {
        let (tx, rx) = oneshot::channel();
        if self.tx.send(Msg::Flush(tx)).await.is_ok() {
            let _ = rx.await;
        }
    }
}

impl WriterGuard {
    /// Join the writer. Only returns after all handles are dropped.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn writer(file: File, path: PathBuf, fsync: FsyncPolicy, mut rx: mpsc::Receiver<Msg>) {
    let mut out = std::io::BufWriter::new(file);
    let mut since_sync = 0u32;
    while let Some(msg) = rx.blocking_recv() {
        match msg {
            Msg::Entry(e) => {
                let mut line = serde_json::to_vec(&e).expect("log entries serialize");
                line.push(b'\n');
                let res = out.write_all(&line).and_then(|_| out.flush());
                if let Err(err) = res {
                    log::error!("writing {}: {err}", path.display());
                    continue;
                }
                since_sync += 1;
                let sync = match fsync {
                    FsyncPolicy::Never => false,
                    FsyncPolicy::Always => true,
                    FsyncPolicy::Every(n) => since_sync >= n,
                };
                if sync {
                    if let Err(err) = out.get_ref().sync_data() {
                        log::error!("fsync {}: {err}", path.display());
                    }
                    since_sync = 0;
                }
            }
            Msg::Flush(ack) => {
                let _ = out.flush();
                let _ = ack.send(());
            }
        }
    }
    let _ = out.flush();
    if fsync != FsyncPolicy::Never {
        let _ = out.get_ref().sync_data();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub entries: Vec<LogEntry>,
    /// A final partial line was skipped.
    pub truncated_tail: bool,
}

impl Replay {
    /// Fraction of logged decisions served at the edge.
    pub fn ca(&self) -> Result<f64, GatewayError> {
        let decisions: Vec<Decision> = self
            .entries
            .iter()
            .map(|e| Decision {
                query_id: e.digest.clone(),
                chosen: e.decision,
                p: Some(e.p),
                realized_score: 0.0,
                realized_latency: e.upstream_latency_s.unwrap_or(0.0),
            })
            .collect();
        Ok(core_metrics(&decisions, 0.0)?.1)
    }
}

/// Read a decision log. A malformed final line without a trailing newline is
/// skipped with a warning. Any other malformed line is an error.
pub fn replay(path: &Path) -> Result<Replay, GatewayError> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut entries = Vec::new();
    let mut line = String::new();
    let mut number = 0usize;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(Replay {
                entries,
                truncated_tail: false,
            });
        }
        number += 1;
        let complete = line.ends_with('\n');
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        match serde_json::from_str::<LogEntry>(trimmed) {
            Ok(e) => entries.push(e),
            Err(_) if !complete => {
                log::warn!("{}: skipping truncated final line {number}", path.display());
                return Ok(Replay {
                    entries,
                    truncated_tail: true,
                });
            }
            Err(e) => {
                return Err(GatewayError::Core(edgeroute_core::Error::Record {
                    line: Some(number),
                    query_id: None,
                    message: format!("bad decision log line: {e}"),
                }))
            }
        }
    }
}
