//! Experiment runs, their reports, and protocol comparison.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::engine::{simulate, Reliability, RunOutput, SetupError};
use crate::trade::{Protocol, TradeOutcome, TradeResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Every producer delivers.
    Reliable,
    /// No producer delivers; every trade ends in a refund.
    Unreliable,
    /// Producers withhold at the configured rate.
    Batch,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Reliable => "reliable",
            Scenario::Unreliable => "unreliable",
            Scenario::Batch => "batch",
        }
    }

    pub fn reliability(self, cfg: &ExperimentConfig) -> Reliability {
        match self {
            Scenario::Reliable => Reliability::All,
            Scenario::Unreliable => Reliability::None,
            Scenario::Batch => Reliability::Random(cfg.unreliable_permille),
        }
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reliable" => Ok(Scenario::Reliable),
            "unreliable" => Ok(Scenario::Unreliable),
            "batch" => Ok(Scenario::Batch),
            other => Err(format!("expected reliable, unreliable or batch, got {other}")),
        }
    }
}

/// One simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub trades: usize,
    pub settled: usize,
    pub refunded: usize,
    pub rejected: usize,
    pub abandoned: usize,
    /// Mean over settled trades; 0 when none settled.
    pub mean_e2e_delay_ms: f64,
    /// Mean consumer fees over all trades.
    pub per_trade_cost: f64,
    pub completion_time_ms: u64,
    pub completion_time_min: f64,
    pub chain_size_bytes: u64,
    pub blocks: usize,
    pub onchain_tx_count: usize,
    pub messages_sent: u64,
    pub trace_digest: String,
    pub chain_valid: bool,
    pub violations: Vec<String>,
    pub outcomes: Vec<TradeOutcome>,
}

impl MetricsReport {
    pub fn from_run(seed: u64, out: &RunOutput) -> Self {
        let o = &out.outcomes;
        let count = |r| o.iter().filter(|t| t.result == r).count();
        let settled: Vec<&TradeOutcome> = o.iter().filter(|t| t.result == TradeResult::SettledPaid).collect();
        let completion = o.iter().map(|t| t.finished_at).max().unwrap_or(0);
        Self {
            seed,
            trades: o.len(),
            settled: settled.len(),
            refunded: count(TradeResult::ExpiredRefunded),
            rejected: count(TradeResult::Rejected),
            abandoned: count(TradeResult::Abandoned),
            mean_e2e_delay_ms: mean(settled.iter().map(|t| t.e2e_delay_ms as f64)),
            per_trade_cost: mean(o.iter().map(|t| t.consumer_fee_paid as f64)),
            completion_time_ms: completion,
            completion_time_min: completion as f64 / 60_000.0,
            chain_size_bytes: out.chain.chain_size_bytes(),
            blocks: out.chain.blocks().len(),
            // Genesis transactions are shared setup, not trade traffic.
            onchain_tx_count: out.chain.tx_count() - out.chain.blocks()[0].txs.len(),
            messages_sent: out.messages_sent,
            trace_digest: out.trace_digest.to_hex(),
            chain_valid: out.verdict.ok,
            violations: out.violations.clone(),
            outcomes: out.outcomes.clone(),
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (n, sum) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// All replicates of one experiment; top-level figures are replicate means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub protocol: Protocol,
    pub scenario: Scenario,
    pub trades: usize,
    pub mean_e2e_delay_ms: f64,
    pub per_trade_cost: f64,
    pub completion_time_min: f64,
    pub chain_size_bytes: f64,
    pub onchain_tx_count: f64,
    pub runs: Vec<MetricsReport>,
}

impl ExperimentReport {
    pub fn from_runs(protocol: Protocol, scenario: Scenario, trades: usize, runs: Vec<MetricsReport>) -> Self {
        Self {
            protocol,
            scenario,
            trades,
            mean_e2e_delay_ms: mean(runs.iter().map(|r| r.mean_e2e_delay_ms)),
            per_trade_cost: mean(runs.iter().map(|r| r.per_trade_cost)),
            completion_time_min: mean(runs.iter().map(|r| r.completion_time_min)),
            chain_size_bytes: mean(runs.iter().map(|r| r.chain_size_bytes as f64)),
            onchain_tx_count: mean(runs.iter().map(|r| r.onchain_tx_count as f64)),
            runs,
        }
    }

    pub fn clean(&self) -> bool {
        self.runs.iter().all(|r| r.chain_valid && r.violations.is_empty())
    }

    pub fn trades_csv(&self) -> String {
        let mut s = String::from("id,protocol,result,delay_ms,fees,tx_count,replicate\n");
        for (rep, run) in self.runs.iter().enumerate() {
            for o in &run.outcomes {
                let result = match o.result {
                    TradeResult::SettledPaid => "settled_paid",
                    TradeResult::ExpiredRefunded => "expired_refunded",
                    TradeResult::Rejected => "rejected",
                    TradeResult::Abandoned => "abandoned",
                };
                writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    o.trade, o.protocol, result, o.e2e_delay_ms, o.consumer_fee_paid, o.onchain_tx_count, rep
                )
                .expect("string write");
            }
        }
        s
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Setup(#[from] SetupError),
    #[error("reports cover {0} and {1} trades")]
    TradeCountMismatch(usize, usize),
}

/// Replicate `i` runs with seed `seed + i`. Also returns the first run's raw output.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    protocol: Protocol,
    scenario: Scenario,
) -> Result<(ExperimentReport, RunOutput), ExperimentError> {
    let mut runs = Vec::with_capacity(cfg.replicates);
    let mut first = None;
    for i in 0..cfg.replicates {
        let c = ExperimentConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let out = simulate(&c, protocol, scenario.reliability(&c))?;
        runs.push(MetricsReport::from_run(c.seed, &out));
        first.get_or_insert(out);
    }
    let report = ExperimentReport::from_runs(protocol, scenario, cfg.trades, runs);
    Ok((report, first.expect("at least one replicate")))
}

/// Ratios of `a` to `b`, typically SPB to baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Comparison {
    pub delay_reduction_pct: f64,
    pub cost_ratio: f64,
    pub throughput_ratio: f64,
    pub size_ratio: f64,
    pub tx_count_ratio: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

pub fn compare(a: &ExperimentReport, b: &ExperimentReport) -> Result<Comparison, ExperimentError> {
    if a.trades != b.trades {
        return Err(ExperimentError::TradeCountMismatch(a.trades, b.trades));
    }
    Ok(Comparison {
        delay_reduction_pct: 100.0 * (1.0 - ratio(a.mean_e2e_delay_ms, b.mean_e2e_delay_ms)),
        cost_ratio: ratio(a.per_trade_cost, b.per_trade_cost),
        throughput_ratio: ratio(a.completion_time_min, b.completion_time_min),
        size_ratio: ratio(a.chain_size_bytes, b.chain_size_bytes),
        tx_count_ratio: ratio(a.onchain_tx_count, b.onchain_tx_count),
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\ndelay_reduction_pct,{:.4}\ncost_ratio,{:.4}\nthroughput_ratio,{:.4}\nsize_ratio,{:.4}\ntx_count_ratio,{:.4}\n",
            self.delay_reduction_pct, self.cost_ratio, self.throughput_ratio, self.size_ratio, self.tx_count_ratio
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(trades: usize) -> ExperimentConfig {
        ExperimentConfig {
            trades,
            replicates: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn aggregates_recompute_from_outcomes() {
        let c = ExperimentConfig {
            unreliable_permille: 400,
            ..cfg(12)
        };
        let (rep, _) = run_experiment(&c, Protocol::Spb, Scenario::Batch).unwrap();
        assert_eq!(rep.runs.len(), 2);
        assert_eq!(rep.runs[1].seed, c.seed + 1);
        for r in &rep.runs {
            let settled: Vec<u64> = r
                .outcomes
                .iter()
                .filter(|o| o.result == TradeResult::SettledPaid)
                .map(|o| o.e2e_delay_ms)
                .collect();
            let expect = if settled.is_empty() { 0.0 } else { settled.iter().sum::<u64>() as f64 / settled.len() as f64 };
            assert!((r.mean_e2e_delay_ms - expect).abs() < 1e-9);
            let fees: u64 = r.outcomes.iter().map(|o| o.consumer_fee_paid).sum();
            assert!((r.per_trade_cost - fees as f64 / r.trades as f64).abs() < 1e-9);
            assert_eq!(r.settled + r.refunded + r.rejected + r.abandoned, r.trades);
            assert_eq!(r.onchain_tx_count, r.settled);
            assert_eq!(r.completion_time_ms, r.outcomes.iter().map(|o| o.finished_at).max().unwrap());
        }
        let m = (rep.runs[0].per_trade_cost + rep.runs[1].per_trade_cost) / 2.0;
        assert!((rep.per_trade_cost - m).abs() < 1e-9);
    }

    #[test]
    fn identical_reports_compare_to_unity() {
        let (rep, _) = run_experiment(&cfg(3), Protocol::Spb, Scenario::Reliable).unwrap();
        let c = compare(&rep, &rep).unwrap();
        assert_eq!(c.delay_reduction_pct, 0.0);
        assert_eq!((c.cost_ratio, c.throughput_ratio, c.size_ratio, c.tx_count_ratio), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn mismatched_trade_counts_rejected() {
        let (a, _) = run_experiment(&cfg(3), Protocol::Spb, Scenario::Reliable).unwrap();
        let (b, _) = run_experiment(&cfg(4), Protocol::Baseline, Scenario::Reliable).unwrap();
        assert!(matches!(compare(&a, &b), Err(ExperimentError::TradeCountMismatch(3, 4))));
    }

    #[test]
    fn csv_has_one_row_per_trade() {
        let (rep, _) = run_experiment(&cfg(5), Protocol::Baseline, Scenario::Reliable).unwrap();
        let csv = rep.trades_csv();
        assert_eq!(csv.lines().count(), 1 + 10);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,baseline,settled_paid,"));
    }
}
