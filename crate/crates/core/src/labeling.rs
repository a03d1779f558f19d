//! Edge-competency labels.
//!
//! The proposed rule marks a query edge-competent when the edge score reaches
//! `min(cloud score, MES)`, or when the cloud model itself misses MES (then
//! paying for the cloud buys nothing). The win rules compare the two scores
//! directly, optionally giving the edge model a head start of `k` points.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rsd::{PairRecord, MAX_SCORE, MIN_SCORE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelStrategy {
    Proposed { mes: f64 },
    WinHard,
    WinSoft { k: f64 },
}

impl LabelStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LabelStrategy::Proposed { mes } => check_score("mes", mes),
            LabelStrategy::WinHard => Ok(()),
            LabelStrategy::WinSoft { k } if k.is_finite() && k > 0.0 => Ok(()),
            LabelStrategy::WinSoft { k } => Err(Error::Range(format!("win-soft offset k must be > 0, got {k}"))),
        }
    }

    pub fn label(&self, score_edge: f64, score_cloud: f64) -> Result<u8> {
        match *self {
            LabelStrategy::Proposed { mes } => label_proposed(score_edge, score_cloud, mes),
            LabelStrategy::WinHard => label_win(score_edge, score_cloud, 0.0),
            LabelStrategy::WinSoft { k } => label_win(score_edge, score_cloud, k),
        }
    }
}

impl fmt::Display for LabelStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelStrategy::Proposed { mes } => write!(f, "proposed:mes={mes}"),
            LabelStrategy::WinHard => f.write_str("win-hard"),
            LabelStrategy::WinSoft { k } => write!(f, "win-soft:k={k}"),
        }
    }
}

impl FromStr for LabelStrategy {
    type Err = Error;

    /// Accepts `proposed:mes=6`, `proposed` (MES 6), `win-hard`, `win-soft:k=1`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let param = |key: &str| -> Result<f64> {
            let a = arg.ok_or_else(|| Error::invalid(format!("strategy {head} requires {key}=<value>")))?;
            let v = a
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| Error::invalid(format!("expected {key}=<value>, got {a:?}")))?;
            v.parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad {key} value {v:?}")))
        };
        let strat = match head {
            "proposed" if arg.is_none() => LabelStrategy::Proposed {
                mes: crate::rsd::DEFAULT_MES,
            },
            "proposed" => LabelStrategy::Proposed { mes: param("mes")? },
            "win-hard" if arg.is_none() => LabelStrategy::WinHard,
            "win-soft" => LabelStrategy::WinSoft { k: param("k")? },
            _ => return Err(Error::invalid(format!("unknown label strategy {s:?}"))),
        };
        strat.validate()?;
        Ok(strat)
    }
}

fn check_score(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && (MIN_SCORE..=MAX_SCORE).contains(&v) {
        Ok(())
    } else {
        Err(Error::Range(format!("{name} = {v} not in [1, 10]")))
    }
}

pub fn label_proposed(score_edge: f64, score_cloud: f64, mes: f64) -> Result<u8> {
    check_score("score_edge", score_edge)?;
    check_score("score_cloud", score_cloud)?;
    check_score("mes", mes)?;
    let case_a = score_edge >= score_cloud.min(mes);
    let case_b = score_cloud < mes;
    Ok((case_a || case_b) as u8)
}

pub fn label_win(score_edge: f64, score_cloud: f64, k: f64) -> Result<u8> {
    check_score("score_edge", score_edge)?;
    check_score("score_cloud", score_cloud)?;
    if !k.is_finite() || k < 0.0 {
        return Err(Error::Range(format!("offset k must be >= 0, got {k}")));
    }
    Ok((score_edge + k >= score_cloud) as u8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingLabel {
    pub query_id: String,
    pub label: u8,
    pub strategy: LabelStrategy,
}

#[derive(Debug, Clone)]
pub struct LabelSet {
    pub labels: Vec<RoutingLabel>,
    pub positive_rate: f64,
}

impl LabelSet {
    pub fn is_degenerate(&self) -> bool {
        self.positive_rate == 0.0 || self.positive_rate == 1.0
    }

    pub fn as_map(&self) -> std::collections::HashMap<String, u8> {
        self.labels.iter().map(|l| (l.query_id.clone(), l.label)).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.labels {
            let line = serde_json::to_string(&WireLabel {
                query_id: l.query_id.clone(),
                label: l.label,
                strategy: l.strategy.to_string(),
            })
            .expect("label serialization cannot fail");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let w: WireLabel =
                serde_json::from_str(line).map_err(|e| Error::record(e.to_string()).at_line(idx + 1))?;
            if w.label > 1 {
                return Err(Error::record(format!("label must be 0 or 1, got {}", w.label)).at_line(idx + 1));
            }
            let strategy: LabelStrategy = w.strategy.parse().map_err(|e: Error| {
                Error::record(e.to_string()).at_line(idx + 1)
            })?;
            labels.push(RoutingLabel {
                query_id: w.query_id,
                label: w.label,
                strategy,
            });
        }
        let positive_rate = positive_rate(&labels);
        Ok(Self { labels, positive_rate })
    }
}

#[derive(Serialize, Deserialize)]
struct WireLabel {
    query_id: String,
    label: u8,
    strategy: String,
}

fn positive_rate(labels: &[RoutingLabel]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().filter(|l| l.label == 1).count() as f64 / labels.len() as f64
}

pub fn label_dataset(pairs: &[PairRecord<'_>], strategy: LabelStrategy) -> Result<LabelSet> {
    if pairs.is_empty() {
        return Err(Error::invalid("cannot label an empty pair set"));
    }
    strategy.validate()?;
    let labels = pairs
        .iter()
        .map(|p| {
            Ok(RoutingLabel {
                query_id: p.query_id().to_owned(),
                label: strategy.label(p.edge.score, p.cloud.score)?,
                strategy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let positive_rate = positive_rate(&labels);
    let set = LabelSet { labels, positive_rate };
    if set.is_degenerate() {
        log::warn!(
            "degenerate label set under {strategy}: positive rate {}",
            set.positive_rate
        );
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proposed_cases() {
        assert_eq!(label_proposed(7.0, 9.0, 6.0).unwrap(), 1);
        assert_eq!(label_proposed(3.0, 9.0, 6.0).unwrap(), 0);
        assert_eq!(label_proposed(2.0, 4.0, 6.0).unwrap(), 1);
        assert!(label_proposed(0.0, 4.0, 6.0).is_err());
        assert!(label_proposed(5.0, 4.0, 10.5).is_err());
    }

    #[test]
    fn win_cases() {
        assert_eq!(label_win(6.0, 6.0, 0.0).unwrap(), 1);
        assert_eq!(label_win(5.0, 6.0, 1.0).unwrap(), 1);
        assert_eq!(label_win(4.0, 7.0, 2.0).unwrap(), 0);
        assert!(label_win(4.0, 7.0, -1.0).is_err());
    }

    /// Independent reading of the rule: edge-competent exactly when the edge
    /// answer is acceptable-and-at-least-as-good as needed, or nothing is.
    fn oracle(e: i32, c: i32, mes: i32) -> u8 {
        let edge_meets_floor = if c < mes { e >= c } else { e >= mes };
        let cloud_fails = c < mes;
        (edge_meets_floor || cloud_fails) as u8
    }

    #[test]
    fn proposed_matches_oracle_on_integer_grid() {
        for e in 1..=10 {
            for c in 1..=10 {
                for m in 1..=10 {
                    assert_eq!(
                        label_proposed(e as f64, c as f64, m as f64).unwrap(),
                        oracle(e, c, m),
                        "({e},{c},{m})"
                    );
                }
            }
        }
    }

    #[test]
    fn mes_piecewise_behavior() {
        // With the cloud meeting MES the label is 1{edge >= mes}: raising MES can
        // only flip 1 -> 0. Once MES passes the cloud score, Case B forces 1.
        for e in 1..=10 {
            for c in 1..=10 {
                for m in 1..=10 {
                    let l = label_proposed(e as f64, c as f64, m as f64).unwrap();
                    let expected = if c >= m { (e >= m) as u8 } else { 1 };
                    assert_eq!(l, expected, "({e},{c},{m})");
                    if m < 10 && c >= m + 1 {
                        let next = label_proposed(e as f64, c as f64, (m + 1) as f64).unwrap();
                        assert!(!(l == 0 && next == 1));
                    }
                }
            }
        }
    }

    #[test]
    fn win_soft_zero_is_win_hard_and_proposed_at_ten() {
        for e in 1..=10 {
            for c in 1..=10 {
                let (e, c) = (e as f64, c as f64);
                assert_eq!(label_win(e, c, 0.0).unwrap(), LabelStrategy::WinHard.label(e, c).unwrap());
                if c == 10.0 {
                    assert_eq!(label_proposed(e, c, 10.0).unwrap(), label_win(e, c, 0.0).unwrap());
                }
            }
        }
    }

    #[test]
    fn parse_and_display_strategies() {
        for s in ["proposed:mes=6", "win-hard", "win-soft:k=1", "proposed:mes=6.5"] {
            assert_eq!(s.parse::<LabelStrategy>().unwrap().to_string(), s);
        }
        assert_eq!("proposed".parse::<LabelStrategy>().unwrap(), LabelStrategy::Proposed { mes: 6.0 });
        assert!("win-soft:k=0".parse::<LabelStrategy>().is_err());
        assert!("win-soft".parse::<LabelStrategy>().is_err());
        assert!("proposed:mes=11".parse::<LabelStrategy>().is_err());
        assert!("oracle".parse::<LabelStrategy>().is_err());
    }
}
