pub mod baseline;
pub mod chain;
pub mod codec;
pub mod coe;
pub mod config;
pub mod engine;
pub mod crypto;
pub mod ctp;
pub mod ledger;
pub mod market;
pub mod merkle;
pub mod overlay;
pub mod session;
pub mod metrics;
pub mod sim;
pub mod trade;
pub mod tx;
