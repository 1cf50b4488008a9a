//! Interactive single-pair market driven by text commands.
//!
//! ```text
//! ctp <producer_addr> <amount> <energy>   commit to pay; prints the CTP id
//! erc <ctp_id> <energy>                   meter receipt; settles the CTP
//! mine                                    advance one mining period and seal a block
//! advance <ms>                            let time pass; expired CTPs are swept
//! timeout <ctp_id>                        ask for a refund of an expired CTP
//! status <ctp_id>
//! accounts
//! ```
//!
//! Commands are deterministic given the config, so a session is fully
//! recovered by replaying its command log.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::chain::{Chain, ChainState};
use crate::coe::{CoeError, MeterIdentity};
use crate::config::ExperimentConfig;
use crate::crypto::{Address, Hash, KeyPair};
use crate::ctp::{CtpError, CtpId, CtpStore, TimeoutOutcome};
use crate::engine::{deploy, SetupError};
use crate::market::{EnergyContract, MarketError};
use crate::sim::SimTime;
use crate::trade::{make_ctp, make_erc, refresh_certificate, Protocol, TradeError};
use crate::tx::{Transaction, TxBody};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("usage: {0}")]
    Usage(&'static str),
    #[error("unknown command `{0}`")]
    UnknownCommand(String),
    #[error("bad argument `{0}`")]
    BadArgument(String),
    #[error(transparent)]
    Ctp(#[from] CtpError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Trade(#[from] TradeError),
    #[error(transparent)]
    Coe(#[from] CoeError),
    #[error("settlement transaction refused: {0}")]
    Submit(String),
    #[error(transparent)]
    Setup(#[from] SetupError),
}

impl SessionError {
    /// Stable machine-readable code, the innermost error variant's name.
    /// Store errors are prefixed `Ctp`.
    pub fn code(&self) -> String {
        let debug = match self {
            SessionError::Ctp(e) => {
                let d = format!("{e:?}");
                if d.starts_with("Ctp") { d } else { format!("Ctp{d}") }
            }
            SessionError::Market(MarketError::Ledger(e)) => format!("{e:?}"),
            SessionError::Market(e) => format!("{e:?}"),
            SessionError::Trade(e) => format!("{e:?}"),
            SessionError::Coe(e) => format!("{e:?}"),
            other => format!("{other:?}"),
        };
        debug.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
    }
}

pub struct Session {
    cfg: ExperimentConfig,
    now: SimTime,
    nonce: u64,
    state: ChainState,
    chain: Chain,
    store: CtpStore,
    contract: EnergyContract,
    consumer: KeyPair,
    producer: Address,
    meter: MeterIdentity,
    peer: MeterIdentity,
}

fn parse_hash(s: &str) -> Result<Hash, SessionError> {
    Hash::from_hex(s.trim_start_matches("0x")).map_err(|_| SessionError::BadArgument(s.into()))
}

fn parse_u64(s: &str) -> Result<u64, SessionError> {
    s.parse().map_err(|_| SessionError::BadArgument(s.into()))
}

impl Session {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, SessionError> {
        let cfg = ExperimentConfig {
            pairs: 1,
            peer_meters: cfg.peer_meters.max(1),
            ..cfg.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut d = deploy(&cfg, Protocol::Spb, &mut rng)?;
        let peer = d.meters.pop().expect("at least one peer meter");
        Ok(Self {
            now: 0,
            nonce: 1,
            state: d.state,
            chain: d.chain,
            store: d.store,
            contract: d.contract,
            consumer: d.consumers.remove(0),
            producer: d.producers[0].address(),
            meter: d.meters.remove(0),
            peer,
            cfg,
        })
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn store(&self) -> &CtpStore {
        &self.store
    }

    pub fn producer(&self) -> Address {
        self.producer
    }

    /// Run one command line; blank lines and `#` comments yield `None`.
    pub fn execute(&mut self, line: &str) -> Result<Option<String>, SessionError> {
        let line = line.split('#').next().unwrap_or("").trim();
        let args: Vec<&str> = line.split_whitespace().collect();
        let Some((&cmd, rest)) = args.split_first() else { return Ok(None) };
        let out = match (cmd.to_ascii_lowercase().as_str(), rest) {
            ("ctp", [addr, amount, energy]) => {
                let producer = Address::from_hex(addr.trim_start_matches("0x"))
                    .map_err(|_| SessionError::BadArgument(addr.to_string()))?;
                self.ctp(producer, parse_u64(amount)?, parse_u64(energy)?)?
            }
            ("ctp", _) => return Err(SessionError::Usage("ctp <tx_addr> <tx_amount> <tx_energy>")),
            ("erc", [id, energy]) => self.erc(parse_hash(id)?, parse_u64(energy)?)?,
            ("erc", _) => return Err(SessionError::Usage("erc <ctp_id> <energy_amount>")),
            ("mine", []) => self.mine(),
            ("advance", [ms]) => self.advance(parse_u64(ms)?),
            ("timeout", [id]) => self.timeout(parse_hash(id)?)?,
            ("status", [id]) => {
                let id = parse_hash(id)?;
                let rec = self.store.get(&id).ok_or(CtpError::NotFound(id))?;
                format!("ctp {id} {:?} expires {}", rec.status, rec.ctp.expiry_time)
            }
            ("accounts", []) => self.accounts(),
            (other, _) => return Err(SessionError::UnknownCommand(other.to_string())),
        };
        Ok(Some(out))
    }

    fn ctp(&mut self, producer: Address, amount: u64, energy: u64) -> Result<String, SessionError> {
        let ctp = make_ctp(&self.consumer, producer, amount, energy, self.cfg.ttl_ms, self.now, self.nonce)?;
        let id = self
            .store
            .insert_ctp(ctp, self.now, &mut self.state.ledger, &mut self.state.market)?;
        self.nonce += 1;
        Ok(format!("ctp {id} pending"))
    }

    fn erc(&mut self, id: CtpId, energy: u64) -> Result<String, SessionError> {
        // Fail before spending a one-time key.
        self.store.settleable(&id, self.now)?;
        if self.meter.remaining_keys() == 0 {
            refresh_certificate(&mut self.meter, &self.peer)?;
        }
        let erc = make_erc(&mut self.meter, id, energy)?;
        let (s, rec) = self.contract.settle_erc(&mut self.store, &erc, self.now)?;
        let tx = Transaction::new(
            rec.ctp.consumer,
            self.cfg.fee,
            0,
            TxBody::SettledCtp {
                ctp: rec.ctp,
                call_data: vec![0x5C; self.cfg.settled_ctp_call_bytes],
            },
        );
        let tx_id = self
            .chain
            .submit_transaction(&self.state, tx)
            .map_err(|e| SessionError::Submit(e.to_string()))?;
        Ok(format!("settled {id}: {} to {} via tx {tx_id}", s.amount, s.producer))
    }

    fn sweep(&mut self) -> Vec<String> {
        self.store
            .sweep_expired(self.now, &mut self.state.ledger, &mut self.state.market)
            .into_iter()
            .map(|id| format!("expired {id} refunded"))
            .collect()
    }

    fn mine(&mut self) -> String {
        self.now += self.cfg.mining_period_ms;
        let mut lines = self.sweep();
        let out = self.chain.mine_tick(&mut self.state, self.now, self.store.db_hash());
        for d in &out.dropped {
            lines.push(format!("dropped {}: {}", d.tx.id, d.error));
        }
        match out.block {
            Some(b) => {
                for tx in &b.txs {
                    if let TxBody::SettledCtp { ctp, .. } = &tx.body {
                        self.store.mark_captured(&ctp.id());
                    }
                }
                self.store.set_epoch(self.chain.next_height());
                lines.push(format!(
                    "block {} txs {} ctp_db_hash {}",
                    b.header.height,
                    b.txs.len(),
                    b.header.ctp_db_hash
                ));
            }
            None => lines.push(format!("no block at {} ms", self.now)),
        }
        lines.join("\n")
    }

    fn advance(&mut self, ms: u64) -> String {
        self.now += ms;
        let mut lines = self.sweep();
        lines.insert(0, format!("now {} ms", self.now));
        lines.join("\n")
    }

    fn timeout(&mut self, id: CtpId) -> Result<String, SessionError> {
        match self
            .store
            .timeout_request(&id, self.now, &mut self.state.ledger, &mut self.state.market)?
        {
            TimeoutOutcome::Refunded => Ok(format!("refunded {id}")),
            TimeoutOutcome::AlreadyRefunded => Ok(format!("already refunded {id}")),
        }
    }

    fn accounts(&self) -> String {
        let name = |a: &Address| {
            if *a == self.consumer.address() {
                " consumer"
            } else if *a == self.producer {
                " producer"
            } else {
                ""
            }
        };
        self.state
            .ledger
            .accounts()
            .map(|(a, s)| format!("{a} available {} held {}{}", s.available, s.held, name(a)))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctp::CtpStatus;

    fn session() -> Session {
        Session::new(&ExperimentConfig::default()).unwrap()
    }

    fn run(s: &mut Session, line: &str) -> String {
        s.execute(line).unwrap().unwrap()
    }

    fn ctp_id(out: &str) -> String {
        out.split_whitespace().nth(1).unwrap().to_string()
    }

    #[test]
    fn ctp_then_erc_then_mine_settles() {
        let mut s = session();
        let p = s.producer();
        let out = run(&mut s, &format!("ctp 0x{p} 40 50"));
        assert!(out.ends_with("pending"), "{out}");
        let id = ctp_id(&out);
        assert!(run(&mut s, &format!("erc {id} 50")).starts_with(&format!("settled {id}: 40 to {p}")));
        let block = run(&mut s, "mine");
        assert!(block.contains("block 1 txs 1"), "{block}");
        let rec = s.store().get(&Hash::from_hex(&id).unwrap()).unwrap();
        assert_eq!(rec.status, CtpStatus::Settled);
        assert!(s.chain().validate(s.store().journal(), 20, Some(s.state())).ok);
    }

    #[test]
    fn unknown_ctp_is_not_found() {
        let mut s = session();
        let e = s.execute(&format!("erc {} 50", Hash([7; 32]))).unwrap_err();
        assert_eq!(e.code(), "CtpNotFound");
    }

    #[test]
    fn expired_ctp_refunds_on_timeout() {
        let mut s = session();
        let p = s.producer();
        let id = ctp_id(&run(&mut s, &format!("ctp {p} 40 50")));
        assert_eq!(s.execute(&format!("timeout {id}")).unwrap_err().code(), "CtpNotYetExpired");
        let swept = run(&mut s, "advance 120001");
        assert!(swept.contains(&format!("expired {id} refunded")), "{swept}");
        assert_eq!(run(&mut s, &format!("timeout {id}")), format!("already refunded {id}"));
        assert_eq!(s.execute(&format!("erc {id} 50")).unwrap_err().code(), "CtpExpired");
    }

    #[test]
    fn usage_and_parse_errors() {
        let mut s = session();
        assert!(matches!(s.execute("ctp 1 2"), Err(SessionError::Usage(_))));
        assert!(matches!(s.execute("ctp zz 1 2"), Err(SessionError::BadArgument(_))));
        assert!(matches!(s.execute("fly"), Err(SessionError::UnknownCommand(_))));
        assert_eq!(s.execute("  # note").unwrap(), None);
    }

    #[test]
    fn replay_reproduces_state() {
        let mut a = session();
        let p = a.producer();
        let id = ctp_id(&run(&mut a, &format!("ctp {p} 40 50")));
        let log = [format!("ctp {p} 40 50"), format!("erc {id} 50"), "mine".to_string()];
        for l in &log[1..] {
            run(&mut a, l);
        }
        let mut b = session();
        for l in &log {
            run(&mut b, l);
        }
        assert_eq!(a.chain().tip().hash(), b.chain().tip().hash());
    }
}
