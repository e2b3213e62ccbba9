//! Run reports and the figures derived from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use statrs::statistics::Statistics;

use qkdn_core::config::TopologyConfig;
use qkdn_core::qkd_link_sim::{LinkStatus, Telemetry};
use qkdn_core::transport::sim::FabricStats;
use qkdn_core::transport::Backend;

use crate::scenario::Scenario;

/// Packet-to-key ratio of AES-256 at its most permissive setting: 389 GB
/// of traffic per 256-bit key.
pub const AES256_RATIO_BYTES: f64 = 389e9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetError;

impl std::fmt::Display for BudgetError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("t_key_mean must be positive and finite")
    }
}

impl std::error::Error for BudgetError {}

/// Encrypted traffic one key stream sustains, in Gbit/s: every key
/// protects `ratio_bytes` of traffic and a new one arrives every
/// `t_key_mean` seconds. `key_bits` names the key the ratio applies to.
pub fn compute_throughput_budget(
    t_key_mean: f64,
    key_bits: u32,
    ratio_bytes: f64,
) -> Result<f64, BudgetError> {
    if !(t_key_mean.is_finite() && t_key_mean > 0.0) || key_bits == 0 {
        return Err(BudgetError);
    }
    Ok(ratio_bytes * 8.0 / t_key_mean / 1e9)
}

/// Mean and sample standard deviation; `None` for fewer than two values.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.len() < 2 {
        return None;
    }
    Some((xs.mean(), xs.std_dev()))
}

/// Per-link telemetry summary beside the configured values.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinkAggregate {
    pub link_id: String,
    pub samples: u64,
    pub skr_mean_bps: f64,
    pub skr_std_bps: f64,
    pub qber_mean_pct: f64,
    pub qber_std_pct: f64,
    pub configured_skr_bps: f64,
    pub configured_skr_std_bps: f64,
    pub configured_qber_pct: f64,
    pub configured_qber_std_pct: f64,
    /// Parameters are placeholders, not measured values.
    pub assumed: bool,
}

/// Summarizes the UP samples of every configured link.
pub fn link_aggregates(cfg: &TopologyConfig, telemetry: &[Telemetry]) -> Vec<LinkAggregate> {
    let mut skr: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut qber: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for t in telemetry.iter().filter(|t| t.state == LinkStatus::Up) {
        skr.entry(t.link_id.as_str()).or_default().push(t.skr_bps);
        qber.entry(t.link_id.as_str()).or_default().push(t.qber_pct);
    }
    cfg.links
        .iter()
        .map(|l| {
            let s = skr
                .get(l.id.as_str())
                .map(Vec::as_slice)
                .unwrap_or_default();
            let q = qber
                .get(l.id.as_str())
                .map(Vec::as_slice)
                .unwrap_or_default();
            let (sm, ss) = mean_std(s).unwrap_or((s.first().copied().unwrap_or(0.0), 0.0));
            let (qm, qs) = mean_std(q).unwrap_or((q.first().copied().unwrap_or(0.0), 0.0));
            LinkAggregate {
                link_id: l.id.clone(),
                samples: s.len() as u64,
                skr_mean_bps: sm,
                skr_std_bps: ss,
                qber_mean_pct: qm,
                qber_std_pct: qs,
                configured_skr_bps: l.skr_bps,
                configured_skr_std_bps: l.skr_bps * l.skr_jitter,
                configured_qber_pct: l.qber_pct,
                configured_qber_std_pct: l.qber_jitter,
                assumed: l.assumed,
            }
        })
        .collect()
}

/// A scenario-specific pass/fail criterion.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub config: String,
    pub scenario: Scenario,
    pub backend: Backend,
    pub seed: u64,
    pub key_size_bits: u32,
    pub exchanges: u64,
    pub succeeded: u64,
    /// Failed exchanges by reason code.
    pub failed: BTreeMap<String, u64>,
    /// Seconds from the master's request to the slave holding the key,
    /// successful exchanges only.
    pub t_key_samples: Vec<f64>,
    pub t_key_mean: Option<f64>,
    pub t_key_std: Option<f64>,
    pub throughput_budget_gbps: Option<f64>,
    /// KMA bits consumed over the run, both ends of every pool counted.
    pub kma_bits_consumed: u64,
    /// The same total rebuilt from the per-segment consumption logs.
    pub kma_bits_audited: u64,
    pub links: Vec<LinkAggregate>,
    pub fabric: FabricStats,
    pub checks: Vec<CheckResult>,
    /// Clock reading at the end of the run, seconds.
    pub duration_s: f64,
}

impl MetricsReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }

    /// Flat `scope,name,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,name,value\n");
        let mut row = |scope: &str, name: &str, value: String| {
            let _ = writeln!(out, "{scope},{name},{value}");
        };
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        row("run", "config", self.config.clone());
        row("run", "scenario", self.scenario.as_str().to_string());
        row(
            "run",
            "backend",
            format!("{:?}", self.backend).to_lowercase(),
        );
        row("run", "seed", self.seed.to_string());
        row("run", "key_size_bits", self.key_size_bits.to_string());
        row("run", "exchanges", self.exchanges.to_string());
        row("run", "succeeded", self.succeeded.to_string());
        row("run", "t_key_mean_s", opt(self.t_key_mean));
        row("run", "t_key_std_s", opt(self.t_key_std));
        row(
            "run",
            "throughput_budget_gbps",
            opt(self.throughput_budget_gbps),
        );
        row(
            "run",
            "kma_bits_consumed",
            self.kma_bits_consumed.to_string(),
        );
        row("run", "kma_bits_audited", self.kma_bits_audited.to_string());
        row("run", "duration_s", format!("{:.6}", self.duration_s));
        row("fabric", "sent", self.fabric.sent.to_string());
        row("fabric", "delivered", self.fabric.delivered.to_string());
        for (k, v) in self.fabric.denied.iter().chain(&self.fabric.lost) {
            row("fabric", k, v.to_string());
        }
        for (k, v) in &self.failed {
            row("failure", k, v.to_string());
        }
        for l in &self.links {
            let scope = format!("link:{}", l.link_id);
            row(&scope, "samples", l.samples.to_string());
            row(&scope, "skr_mean_bps", format!("{:.3}", l.skr_mean_bps));
            row(&scope, "skr_std_bps", format!("{:.3}", l.skr_std_bps));
            row(&scope, "qber_mean_pct", format!("{:.4}", l.qber_mean_pct));
            row(&scope, "qber_std_pct", format!("{:.4}", l.qber_std_pct));
        }
        for c in &self.checks {
            row(
                "check",
                &c.name,
                if c.passed { "PASS" } else { "FAIL" }.to_string(),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_examples() {
        // oracle: 389e9 * 8 = 3.112e12 bit per key
        let at = |t| compute_throughput_budget(t, 256, AES256_RATIO_BYTES).unwrap();
        assert!((at(17.34) - 3112.0 / 17.34).abs() < 1e-9);
        assert!((at(1.0) - 3112.0).abs() < 1e-9);
        assert!((at(34.68) - 89.734).abs() < 1e-3);
        assert_eq!(
            compute_throughput_budget(0.0, 256, AES256_RATIO_BYTES),
            Err(BudgetError)
        );
        assert_eq!(
            compute_throughput_budget(f64::NAN, 256, AES256_RATIO_BYTES),
            Err(BudgetError)
        );
    }

    #[test]
    fn sample_std_of_a_known_set() {
        // 2,4,4,4,5,5,7,9: mean 5, sum of squares 32, sample variance 32/7
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[1.0]), None);
    }
}
