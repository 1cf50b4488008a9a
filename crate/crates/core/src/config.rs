//! Experiment configuration in a flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored; a `#` after a value
//! starts a trailing comment. Unknown keys are errors. [`ExperimentConfig::to_text`]
//! writes every key, so its output parses back to the same config.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trade::Protocol;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spb" => Ok(Protocol::Spb),
            "baseline" => Ok(Protocol::Baseline),
            other => Err(format!("expected spb or baseline, got {other}")),
        }
    }
}

macro_rules! config {
    ($($(#[$doc:meta])* $name:ident: $ty:ty = $default:expr,)*) => {
        #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
        pub struct ExperimentConfig {
            $($(#[$doc])* pub $name: $ty,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Set one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), Option<String>> {
                match key {
                    $(stringify!($name) => {
                        self.$name = value.parse::<$ty>().map_err(|e| Some(e.to_string()))?;
                    })*
                    _ => return Err(None),
                }
                Ok(())
            }

            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", stringify!($name), self.$name).expect("string write");)*
                s
            }
        }
    };
}

config! {
    seed: u64 = 1,
    protocol: Protocol = Protocol::Spb,
    trades: usize = 100,
    /// Consumer/producer pairs trading back to back.
    pairs: usize = 2,
    replicates: usize = 1,
    mining_period_ms: u64 = 15_000,
    block_capacity: usize = 8,
    fee: u64 = 20,
    latency_base_ms: u64 = 50,
    latency_jitter_ms: u64 = 20,
    /// Time a node needs to build and sign a transaction or receipt.
    tx_generation_ms: u64 = 1_000,
    /// Miner-side work per CTP before it is stored.
    ctp_processing_ms: u64 = 1_000,
    /// Contract-side work per receipt before settlement.
    erc_processing_ms: u64 = 1_000,
    /// Uniform extra delay `0..=jitter` added to each processing step.
    processing_jitter_ms: u64 = 0,
    transfer_ms: u64 = 5_000,
    ttl_ms: u64 = 120_000,
    /// Start the next trade once the last message of the current one is sent.
    pipelined: bool = false,
    amount: u64 = 40,
    energy_per_trade: u64 = 50,
    price_per_kwh: u64 = 1,
    initial_balance: u64 = 1_000_000,
    producer_energy: u64 = 1_000_000,
    burn_amount: u64 = 10,
    /// Create energy accounts by authority certificate instead of burn.
    authority_accounts: bool = false,
    meter_tree_width: usize = 16,
    /// Meters beyond the consumers' own, available as certificate signers.
    peer_meters: usize = 2,
    /// Share of batch trades whose producer never delivers.
    unreliable_permille: u32 = 0,
    /// Share of trades for which an adversary submits a forged receipt.
    forged_erc_permille: u32 = 0,
    backbone_prefix_bits: u32 = 2,
    contract_code_bytes: usize = 0,
    energy_add_call_bytes: usize = 0,
    settled_ctp_call_bytes: usize = 0,
    baseline_deploy_code_bytes: usize = 0,
    baseline_pay_in_call_bytes: usize = 0,
    baseline_confirm_call_bytes: usize = 0,
    /// Simulated-time cutoff; 0 derives one from the trade count.
    horizon_ms: u64 = 0,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|e| match e {
                None => ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                },
                Some(reason) => ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    value: value.to_string(),
                    reason,
                },
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("trades", self.trades as u64),
            ("pairs", self.pairs as u64),
            ("replicates", self.replicates as u64),
            ("mining_period_ms", self.mining_period_ms),
            ("block_capacity", self.block_capacity as u64),
            ("fee", self.fee),
            ("ttl_ms", self.ttl_ms),
            ("amount", self.amount),
            ("energy_per_trade", self.energy_per_trade),
            ("price_per_kwh", self.price_per_kwh),
            ("initial_balance", self.initial_balance),
            ("producer_energy", self.producer_energy),
            ("meter_tree_width", self.meter_tree_width as u64),
            ("peer_meters", self.peer_meters as u64),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("{k} must be positive")));
        }
        if !self.meter_tree_width.is_power_of_two() {
            return Err(ConfigError::Invalid("meter_tree_width must be a power of two".into()));
        }
        if self.unreliable_permille > 1000 || self.forged_erc_permille > 1000 {
            return Err(ConfigError::Invalid("permille values must not exceed 1000".into()));
        }
        if !(1..=8).contains(&self.backbone_prefix_bits) {
            return Err(ConfigError::Invalid("backbone_prefix_bits must be 1..=8".into()));
        }
        if !self.authority_accounts && self.burn_amount > self.initial_balance {
            return Err(ConfigError::Invalid("burn_amount exceeds initial_balance".into()));
        }
        Ok(())
    }

    /// Simulated time after which a run is cut off.
    pub fn horizon(&self) -> u64 {
        if self.horizon_ms > 0 {
            return self.horizon_ms;
        }
        // Generous bound: every trade run alone, one after another.
        let per_trade = self.ttl_ms
            + self.transfer_ms
            + 10 * self.mining_period_ms
            + 2 * (self.ctp_processing_ms + self.erc_processing_ms + self.processing_jitter_ms);
        per_trade * (self.trades as u64 + 2)
    }
}
