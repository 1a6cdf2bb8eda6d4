//! Per-episode records, their JSONL form, and aggregation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Bootstrap,
    Train,
    Eval,
    Base,
}

/// One metrics line. Field order is the serialized order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub phase: Phase,
    pub episode: usize,
    pub seed: u64,
    pub volume: Option<usize>,
    pub success: bool,
    pub steps: usize,
    pub mean_residual_norm: f64,
    pub reward_sum: f64,
}

pub fn write_jsonl<'a>(records: impl IntoIterator<Item = &'a EpisodeRecord>, mut w: impl Write) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<EpisodeRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("metrics line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Sufficient statistics; merging is associative and commutative.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Tally {
    pub episodes: usize,
    pub successes: usize,
    pub success_steps: usize,
    pub residual_norm_sum: f64,
}

impl Tally {
    pub fn add(&mut self, r: &EpisodeRecord) {
        self.episodes += 1;
        if r.success {
            self.successes += 1;
            self.success_steps += r.steps;
        }
        self.residual_norm_sum += r.mean_residual_norm;
    }

    pub fn merge(&mut self, other: &Tally) {
        self.episodes += other.episodes;
        self.successes += other.successes;
        self.success_steps += other.success_steps;
        self.residual_norm_sum += other.residual_norm_sum;
    }

    pub fn success_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }

    /// `None` when no episode succeeded.
    pub fn avg_steps_on_success(&self) -> Option<f64> {
        (self.successes > 0).then(|| self.success_steps as f64 / self.successes as f64)
    }

    pub fn mean_residual_norm(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.residual_norm_sum / self.episodes as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub episodes: usize,
    pub success_rate: f64,
    pub avg_steps_on_success: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub episodes: usize,
    pub success_rate: f64,
    pub avg_steps_on_success: Option<f64>,
    pub mean_residual_norm: f64,
    pub per_seed: Vec<SeedMetrics>,
}

impl Metrics {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a EpisodeRecord>) -> Self {
        let mut by_seed: BTreeMap<u64, Tally> = BTreeMap::new();
        for r in records {
            by_seed.entry(r.seed).or_default().add(r);
        }
        let mut total = Tally::default();
        for t in by_seed.values() {
            total.merge(t);
        }
        Self {
            episodes: total.episodes,
            success_rate: total.success_rate(),
            avg_steps_on_success: total.avg_steps_on_success(),
            mean_residual_norm: total.mean_residual_norm(),
            per_seed: by_seed
                .iter()
                .map(|(&seed, t)| SeedMetrics {
                    seed,
                    episodes: t.episodes,
                    success_rate: t.success_rate(),
                    avg_steps_on_success: t.avg_steps_on_success(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seed: u64, success: bool, steps: usize) -> EpisodeRecord {
        EpisodeRecord {
            phase: Phase::Eval,
            episode: 0,
            seed,
            volume: Some(10),
            success,
            steps,
            mean_residual_norm: 0.5,
            reward_sum: -1.0,
        }
    }

    #[test]
    fn steps_on_success_ignore_failures() {
        let rs = [rec(0, true, 10), rec(0, false, 64), rec(1, true, 20), rec(1, false, 64)];
        let m = Metrics::from_records(&rs);
        assert_eq!(m.episodes, 4);
        assert_eq!(m.success_rate, 0.5);
        assert_eq!(m.avg_steps_on_success, Some(15.0));
        assert_eq!(m.per_seed.len(), 2);
        assert_eq!(m.per_seed[1].avg_steps_on_success, Some(20.0));
        assert_eq!(Metrics::from_records(&[rec(0, false, 5)]).avg_steps_on_success, None);
    }

    #[test]
    fn aggregation_is_order_free() {
        let rs = [rec(2, true, 3), rec(0, false, 64), rec(1, true, 20), rec(0, true, 7)];
        let mut rev = rs.to_vec();
        rev.reverse();
        assert_eq!(Metrics::from_records(&rs), Metrics::from_records(&rev));
    }

    #[test]
    fn jsonl_round_trip_and_field_order() {
        let rs = vec![rec(0, true, 10), EpisodeRecord { volume: None, phase: Phase::Train, ..rec(3, false, 64) }];
        let mut buf = Vec::new();
        write_jsonl(&rs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            r#"{"phase":"eval","episode":0,"seed":0,"volume":10,"success":true,"steps":10,"mean_residual_norm":0.5,"reward_sum":-1.0}"#
        ));
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), rs);
        assert!(read_jsonl("{bad".as_bytes()).is_err());
    }
}
