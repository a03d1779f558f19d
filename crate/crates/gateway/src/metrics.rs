use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use edgeroute_core::evaluation::Side;

pub const P_BUCKETS: usize = 10;
pub const OVERHEAD_WINDOW: usize = 10_000;

#[derive(Debug)]
pub struct Metrics {
    requests_total: AtomicU64,
    edge_routed: AtomicU64,
    cloud_routed: AtomicU64,
    fallbacks: AtomicU64,
    degraded_requests: AtomicU64,
    errors: AtomicU64,
    in_flight: AtomicU64,
    p_hist: [AtomicU64; P_BUCKETS],
    overhead: Mutex<VecDeque<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub requests_total: u64,
    pub edge_routed: u64,
    pub cloud_routed: u64,
    pub fallbacks: u64,
    pub degraded_requests: u64,
    pub errors: u64,
    pub in_flight: u64,
    /// Bucket `i` counts `p` in `[i/10, (i+1)/10)`; the last bucket includes 1.
    pub p_hist: [u64; P_BUCKETS],
    pub overhead_samples: usize,
    pub overhead_p50: Option<f64>,
    pub overhead_p90: Option<f64>,
    pub overhead_p99: Option<f64>,
}

/// Nearest-rank quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn p_bucket(p: f64) -> usize {
    ((p * P_BUCKETS as f64) as usize).min(P_BUCKETS - 1)
}

impl Default for Metrics {
    fn default() -> Self {
        Self {
            requests_total: AtomicU64::new(0),
            edge_routed: AtomicU64::new(0),
            cloud_routed: AtomicU64::new(0),
            fallbacks: AtomicU64::new(0),
            degraded_requests: AtomicU64::new(0),
            errors: AtomicU64::new(0),
            in_flight: AtomicU64::new(0),
            p_hist: Default::default(),
            overhead: Mutex::new(VecDeque::with_capacity(OVERHEAD_WINDOW)),
        }
    }
}

impl Metrics {
    pub fn begin(&self) {
        self.requests_total.fetch_add(1, Ordering::SeqCst);
        self.in_flight.fetch_add(1, Ordering::SeqCst);
    }

    pub fn observe_decision(&self, p: f64, overhead_s: f64, degraded: bool) {
        self.p_hist[p_bucket(p)].fetch_add(1, Ordering::Relaxed);
        if degraded {
            self.degraded_requests.fetch_add(1, Ordering::Relaxed);
        }
        let mut window = self.overhead.lock().unwrap();
        if window.len() == OVERHEAD_WINDOW {
            window.pop_front();
        }
        window.push_back(overhead_s);
    }

    /// Close a request that produced a routing response.
    pub fn finish_routed(&self, served: Side, fallback: bool) {
        if fallback {
            self.fallbacks.fetch_add(1, Ordering::SeqCst);
        }
        match served {
            Side::Edge => self.edge_routed.fetch_add(1, Ordering::SeqCst),
            Side::Cloud => self.cloud_routed.fetch_add(1, Ordering::SeqCst),
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }

    pub fn finish_error(&self, fallback: bool) {
        if fallback {
            self.fallbacks.fetch_add(1, Ordering::SeqCst);
        }
        self.errors.fetch_add(1, Ordering::SeqCst);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut sorted: Vec<f64> = self.overhead.lock().unwrap().iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        Snapshot {
            requests_total: self.requests_total.load(Ordering::SeqCst),
            edge_routed: self.edge_routed.load(Ordering::SeqCst),
            cloud_routed: self.cloud_routed.load(Ordering::SeqCst),
            fallbacks: self.fallbacks.load(Ordering::SeqCst),
            degraded_requests: self.degraded_requests.load(Ordering::SeqCst),
            errors: self.errors.load(Ordering::SeqCst),
            in_flight: self.in_flight.load(Ordering::SeqCst),
            p_hist: std::array::from_fn(|i| self.p_hist[i].load(Ordering::Relaxed)),
            overhead_samples: sorted.len(),
            overhead_p50: quantile(&sorted, 0.5),
            overhead_p90: quantile(&sorted, 0.9),
            overhead_p99: quantile(&sorted, 0.99),
        }
    }
}

impl Snapshot {
    /// `key=value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let counters = [
            ("requests_total", self.requests_total),
            ("edge_routed", self.edge_routed),
            ("cloud_routed", self.cloud_routed),
            ("fallbacks", self.fallbacks),
            ("degraded_requests", self.degraded_requests),
            ("errors", self.errors),
            ("in_flight", self.in_flight),
        ];
        for (k, v) in counters {
            writeln!(out, "{k}={v}").unwrap();
        }
        for (i, c) in self.p_hist.iter().enumerate() {
            writeln!(out, "p_bucket_{:.1}_{:.1}={c}", i as f64 / 10.0, (i + 1) as f64 / 10.0).unwrap();
        }
        writeln!(out, "router_overhead_samples={}", self.overhead_samples).unwrap();
        for (k, v) in [
            ("router_overhead_p50_s", self.overhead_p50),
            ("router_overhead_p90_s", self.overhead_p90),
            ("router_overhead_p99_s", self.overhead_p99),
        ] {
            match v {
                Some(v) => writeln!(out, "{k}={v:.6}").unwrap(),
                None => writeln!(out, "{k}=").unwrap(),
            }
        }
        out
    }

    pub fn parse_line_value(text: &str, key: &str) -> Option<String> {
        text.lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.to_owned())
    }
}
