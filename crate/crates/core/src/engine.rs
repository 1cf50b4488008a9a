//! A simulated deployment: one miner, consumer/producer pairs with their
//! meters, spare peer meters and an adversary, all on one event loop.
//!
//! Pairs trade back to back: a consumer starts its next trade once the
//! previous one finishes, or, when pipelined, once it has sent its last
//! message for it. Trade ids are handed out in start order.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::baseline::{BaselineSizes, BaselineTrade, EscrowPhase};
use crate::chain::{Chain, ChainParams, ChainState, Verdict};
use crate::coe::{issue_certificate, Manufacturer, MeterIdentity};
use crate::config::ExperimentConfig;
use crate::crypto::{digest_parts, keypair_from_label, Address, Hash, KeyPair};
use crate::ctp::{Ctp, CtpId, CtpStatus, CtpStore, TimeoutOutcome};
use crate::ledger::Ledger;
use crate::market::{authority_message, AccountMode, EnergyContract, EnergyMarket, MarketError};
use crate::sim::{LatencyModel, Network, NodeId, Payload, SimTime};
use crate::trade::{
    forge_erc, make_ctp, make_erc, refresh_certificate, ConsumerEvent, ConsumerPhase, Erc, MeterEvent,
    MeterPhase, ProducerEvent, ProducerPhase, Protocol, Step, TradeError, TradeOutcome, TradeResult,
};
use crate::tx::{Transaction, TxBody};

/// Which producers deliver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reliability {
    All,
    None,
    /// Each trade's producer withholds with this probability in permille.
    Random(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BaselineStage {
    Deploy,
    PayIn,
    Confirm,
}

#[derive(Debug, Clone, Serialize)]
pub struct Announce {
    pub height: u64,
    pub timestamp: SimTime,
    pub tx_ids: Vec<Hash>,
    pub settled: Vec<CtpId>,
}

#[derive(Debug, Clone)]
pub enum Msg {
    Begin,
    SendCtp { tid: usize },
    CtpSubmit { tid: usize, ctp: Ctp },
    CtpProcessed { tid: usize, ctp: Ctp },
    CtpStored { tid: usize, ctp_id: CtpId },
    CtpRejected { tid: usize, reason: String },
    EnergyDelivered { tid: usize },
    SendErc { tid: usize },
    Forge { tid: usize },
    ErcSubmit { tid: usize, erc: Box<Erc>, forged: bool },
    ErcProcessed { tid: usize, erc: Box<Erc>, forged: bool },
    ExpiryTimer { tid: usize },
    TimeoutRequest { tid: usize, ctp_id: CtpId },
    TimeoutReply { tid: usize, refunded: bool },
    SendTx { tid: usize, stage: BaselineStageTag },
    TxSubmit { tid: usize, tx: Box<Transaction> },
    MineTick,
    Block(Arc<Announce>),
}

/// Public mirror of the baseline stage, carried in messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineStageTag(BaselineStage);

impl Payload for Msg {
    fn kind(&self) -> &'static str {
        match self {
            Msg::Begin => "begin",
            Msg::SendCtp { .. } => "send_ctp",
            Msg::CtpSubmit { .. } => "ctp_submit",
            Msg::CtpProcessed { .. } => "ctp_processed",
            Msg::CtpStored { .. } => "ctp_stored",
            Msg::CtpRejected { .. } => "ctp_rejected",
            Msg::EnergyDelivered { .. } => "energy_delivered",
            Msg::SendErc { .. } => "send_erc",
            Msg::Forge { .. } => "forge",
            Msg::ErcSubmit { .. } => "erc_submit",
            Msg::ErcProcessed { .. } => "erc_processed",
            Msg::ExpiryTimer { .. } => "expiry_timer",
            Msg::TimeoutRequest { .. } => "timeout_request",
            Msg::TimeoutReply { .. } => "timeout_reply",
            Msg::SendTx { .. } => "send_tx",
            Msg::TxSubmit { .. } => "tx_submit",
            Msg::MineTick => "mine_tick",
            Msg::Block(_) => "block",
        }
    }

    fn digest(&self) -> Hash {
        let tid = |t: &usize| (*t as u64).to_le_bytes();
        let kind = self.kind().as_bytes();
        match self {
            Msg::Begin | Msg::MineTick => digest_parts(&[kind]),
            Msg::SendCtp { tid: t }
            | Msg::EnergyDelivered { tid: t }
            | Msg::SendErc { tid: t }
            | Msg::Forge { tid: t }
            | Msg::ExpiryTimer { tid: t } => digest_parts(&[kind, &tid(t)]),
            Msg::CtpSubmit { tid: t, ctp } | Msg::CtpProcessed { tid: t, ctp } => {
                digest_parts(&[kind, &tid(t), &ctp.id().0])
            }
            Msg::CtpStored { tid: t, ctp_id } | Msg::TimeoutRequest { tid: t, ctp_id } => {
                digest_parts(&[kind, &tid(t), &ctp_id.0])
            }
            Msg::CtpRejected { tid: t, reason } => digest_parts(&[kind, &tid(t), reason.as_bytes()]),
            Msg::ErcSubmit { tid: t, erc, forged } | Msg::ErcProcessed { tid: t, erc, forged } => digest_parts(&[
                kind,
                &tid(t),
                &erc.ctp_id.0,
                &erc.leaf_pk.0,
                &erc.meter_sig.0,
                &[*forged as u8],
            ]),
            Msg::TimeoutReply { tid: t, refunded } => digest_parts(&[kind, &tid(t), &[*refunded as u8]]),
            Msg::SendTx { tid: t, stage } => digest_parts(&[kind, &tid(t), &[stage.0 as u8]]),
            Msg::TxSubmit { tid: t, tx } => digest_parts(&[kind, &tid(t), &tx.id.0]),
            Msg::Block(a) => {
                let mut parts: Vec<&[u8]> = vec![kind];
                let h = a.height.to_le_bytes();
                parts.push(&h);
                for id in &a.tx_ids {
                    parts.push(&id.0);
                }
                digest_parts(&parts)
            }
        }
    }
}

/// One line of the protocol step log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepRecord {
    pub trade: Option<usize>,
    pub step: u8,
    pub time_ms: SimTime,
    pub actor: String,
    pub action: String,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let trade = self.trade.map_or_else(|| "-".to_string(), |t| t.to_string());
        write!(f, "{},{},{},{},{}", trade, self.step, self.time_ms, self.actor, self.action)
    }
}

struct Consumer {
    node: NodeId,
    keypair: KeyPair,
    nonce: u64,
    /// The trade that must release before the next may start.
    active: Option<usize>,
    open: BTreeSet<usize>,
}

struct Producer {
    node: NodeId,
    address: Address,
}

struct Meter {
    node: NodeId,
    identity: MeterIdentity,
    phase: MeterPhase,
    last_erc: Option<Erc>,
}

struct Miner {
    node: NodeId,
    state: ChainState,
    chain: Chain,
    store: CtpStore,
    contract: EnergyContract,
}

struct Trade {
    pair: usize,
    reliable: bool,
    forged: bool,
    started_at: SimTime,
    consumer_phase: ConsumerPhase,
    producer_phase: ProducerPhase,
    ctp: Option<Ctp>,
    baseline: Option<BaselineTrade>,
    fees: u64,
    tx_count: usize,
    blocks: BTreeSet<u64>,
    producer_received: u64,
    finished: Option<(SimTime, TradeResult)>,
}

/// Everything a finished run leaves behind.
pub struct RunOutput {
    pub protocol: Protocol,
    pub outcomes: Vec<TradeOutcome>,
    pub steps: Vec<StepRecord>,
    pub chain: Chain,
    pub state: ChainState,
    pub store: CtpStore,
    pub verdict: Verdict,
    pub violations: Vec<String>,
    pub trace_digest: Hash,
    pub event_trace: String,
    pub messages_sent: u64,
    pub forged_submitted: usize,
    pub forged_rejected: usize,
    pub settlements: usize,
    pub end_time: SimTime,
}

pub struct World {
    cfg: ExperimentConfig,
    protocol: Protocol,
    reliability: Reliability,
    net: Network<Msg>,
    miner: Miner,
    consumers: Vec<Consumer>,
    producers: Vec<Producer>,
    meters: Vec<Meter>,
    adversary: NodeId,
    trades: Vec<Trade>,
    by_tx: HashMap<Hash, usize>,
    by_ctp: HashMap<CtpId, usize>,
    steps: Vec<StepRecord>,
    violations: Vec<String>,
    supply: u128,
    forged_submitted: usize,
    forged_rejected: usize,
    ticking: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum SetupError {
    #[error("genesis failed: {0}")]
    Genesis(String),
}
fn label(seed: u64, what: &str, i: usize) -> KeyPair {
    keypair_from_label(format!("{what}/{seed}/{i}").as_bytes())
}

/// Genesis state shared by both protocols: funded consumers and producers,
/// producer energy accounts, certified meters, and block 0 holding the market
/// contract deployment and each producer's energy listing.
pub struct Deployment {
    pub miner: Address,
    pub state: ChainState,
    pub chain: Chain,
    pub store: CtpStore,
    pub contract: EnergyContract,
    pub consumers: Vec<KeyPair>,
    pub producers: Vec<KeyPair>,
    /// One per pair, then the peer meters.
    pub meters: Vec<MeterIdentity>,
    pub supply: u128,
}

/// Build the genesis deployment; `rng` picks each meter's certificate signer.
pub fn deploy<R: Rng>(cfg: &ExperimentConfig, protocol: Protocol, rng: &mut R) -> Result<Deployment, SetupError> {
    let seed = cfg.seed;
    let genesis_err = |e: &dyn fmt::Display| SetupError::Genesis(e.to_string());
    let miner = label(seed, "miner", 0).address();
    let authority = label(seed, "authority", 0);
    let manufacturer = Manufacturer::new(label(seed, "manufacturer", 0));

    let mut ledger = Ledger::new();
    ledger.open(miner, 0).map_err(|e| genesis_err(&e))?;
    let mut market = EnergyMarket::new(authority.public_key);
    let mut consumers = Vec::new();
    let mut producers = Vec::new();
    for i in 0..cfg.pairs {
        let c = label(seed, "consumer", i);
        ledger.open_keyed(c.public_key, cfg.initial_balance).map_err(|e| genesis_err(&e))?;
        consumers.push(c);
        let p = label(seed, "producer", i);
        let address = ledger.open_keyed(p.public_key, cfg.initial_balance).map_err(|e| genesis_err(&e))?;
        let mode = if cfg.authority_accounts {
            AccountMode::AuthorityCert(authority.sign(&authority_message(&address)))
        } else {
            AccountMode::Burn(cfg.burn_amount)
        };
        market.create_energy_account(&mut ledger, address, mode).map_err(|e| genesis_err(&e))?;
        producers.push(p);
    }
    let mut meters = (0..cfg.pairs + cfg.peer_meters)
        .map(|i| {
            let s = digest_parts(&[b"meter", &seed.to_le_bytes(), &(i as u64).to_le_bytes()]);
            manufacturer.provision(s.0, cfg.meter_tree_width).map_err(|e| genesis_err(&e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    for i in 0..meters.len() {
        let j = pick_other(rng, meters.len(), i);
        let cert = issue_certificate(meters[i].tree.root(), &meters[j]).map_err(|e| genesis_err(&e))?;
        meters[i].install_certificate(cert).map_err(|e| genesis_err(&e))?;
    }

    let mut genesis_txs = vec![Transaction::new(
        consumers[0].address(),
        cfg.fee,
        0,
        TxBody::ContractDeploy {
            code: vec![0xC0; cfg.contract_code_bytes],
        },
    )];
    for p in &producers {
        genesis_txs.push(Transaction::new(
            p.address(),
            cfg.fee,
            0,
            TxBody::EnergyAdd {
                energy: cfg.producer_energy,
                price_per_kwh: cfg.price_per_kwh,
                call_data: vec![0xEA; cfg.energy_add_call_bytes],
            },
        ));
    }
    let mut state = ChainState::new(ledger, market);
    let supply = state.ledger.total_supply();
    let fee_reserve = match protocol {
        Protocol::Spb => cfg.fee,
        Protocol::Baseline => 0,
    };
    let mut store = CtpStore::new(fee_reserve);
    let params = ChainParams {
        capacity: cfg.block_capacity,
        fee: cfg.fee,
        miner,
    };
    let chain = Chain::genesis(params, &mut state, genesis_txs, store.db_hash()).map_err(|e| genesis_err(&e))?;
    store.set_epoch(chain.next_height());
    Ok(Deployment {
        miner,
        state,
        chain,
        store,
        contract: EnergyContract::new(manufacturer.public_key()),
        consumers,
        producers,
        meters,
        supply,
    })
}

impl World {
    pub fn new(cfg: &ExperimentConfig, protocol: Protocol, reliability: Reliability) -> Result<Self, SetupError> {
        let latency = LatencyModel {
            base_ms: cfg.latency_base_ms,
            jitter_ms: cfg.latency_jitter_ms,
        };
        let mut net = Network::new(latency, cfg.seed);
        let d = deploy(cfg, protocol, net.rng())?;
        let miner_node = net.add_node();
        let mut consumers = Vec::new();
        let mut producers = Vec::new();
        let mut meter_nodes = Vec::new();
        for (c, p) in d.consumers.into_iter().zip(&d.producers) {
            consumers.push(Consumer {
                node: net.add_node(),
                keypair: c,
                nonce: 0,
                active: None,
                open: BTreeSet::new(),
            });
            producers.push(Producer {
                node: net.add_node(),
                address: p.address(),
            });
            meter_nodes.push(net.add_node());
        }
        consumers[0].nonce = 1;
        for _ in 0..cfg.peer_meters {
            meter_nodes.push(net.add_node());
        }
        let adversary = net.add_node();
        let meters = d
            .meters
            .into_iter()
            .zip(meter_nodes)
            .map(|(identity, node)| Meter {
                node,
                identity,
                phase: MeterPhase::Waiting,
                last_erc: None,
            })
            .collect();
        let mut world = Self {
            cfg: cfg.clone(),
            protocol,
            reliability,
            net,
            miner: Miner {
                node: miner_node,
                state: d.state,
                chain: d.chain,
                store: d.store,
                contract: d.contract,
            },
            consumers,
            producers,
            meters,
            adversary,
            trades: Vec::new(),
            by_tx: HashMap::new(),
            by_ctp: HashMap::new(),
            steps: Vec::new(),
            violations: Vec::new(),
            supply: d.supply,
            forged_submitted: 0,
            forged_rejected: 0,
            ticking: true,
        };
        world.step(None, 1, "consumer0", "deploys the market contract in the genesis block".into());
        Ok(world)
    }

    fn step(&mut self, trade: Option<usize>, step: u8, actor: &str, action: String) {
        self.steps.push(StepRecord {
            trade,
            step,
            time_ms: self.net.now(),
            actor: actor.to_string(),
            action,
        });
    }

    fn jitter(&mut self) -> u64 {
        match self.cfg.processing_jitter_ms {
            0 => 0,
            j => self.net.rng().gen_range(0..=j),
        }
    }

    fn sizes(&self) -> BaselineSizes {
        BaselineSizes {
            deploy_code: self.cfg.baseline_deploy_code_bytes,
            pay_in_call: self.cfg.baseline_pay_in_call_bytes,
            confirm_call: self.cfg.baseline_confirm_call_bytes,
        }
    }

    fn schedule(&mut self, delay: SimTime, target: NodeId, msg: Msg) {
        self.net.schedule_after(delay, target, msg).expect("known node, future time");
    }

    fn unicast(&mut self, from: NodeId, to: NodeId, msg: Msg) {
        self.net.unicast(from, to, msg).expect("known nodes");
    }

    fn consumer_step(&mut self, tid: usize, e: ConsumerEvent) -> bool {
        let phase = self.trades[tid].consumer_phase;
        match phase.step(e) {
            Step::Move(next) => {
                self.trades[tid].consumer_phase = next;
                true
            }
            Step::Stay => false,
            Step::Illegal => {
                self.violations.push(format!("trade {tid}: consumer {phase:?} cannot take {e:?}"));
                false
            }
        }
    }

    fn producer_step(&mut self, tid: usize, e: ProducerEvent) {
        let phase = self.trades[tid].producer_phase;
        match phase.step(e) {
            Step::Move(next) => self.trades[tid].producer_phase = next,
            Step::Stay => {}
            Step::Illegal => self
                .violations
                .push(format!("trade {tid}: producer {phase:?} cannot take {e:?}")),
        }
    }

    fn meter_step(&mut self, pair: usize, e: MeterEvent) {
        let phase = self.meters[pair].phase;
        match phase.step(e) {
            Step::Move(MeterPhase::Sent) => self.meters[pair].phase = MeterPhase::Waiting,
            Step::Move(next) => self.meters[pair].phase = next,
            Step::Stay => {}
            Step::Illegal => self.violations.push(format!("meter {pair}: {phase:?} cannot take {e:?}")),
        }
    }

    /// Run to completion or the horizon.
    pub fn run(mut self) -> RunOutput {
        for c in 0..self.consumers.len() {
            let node = self.consumers[c].node;
            self.schedule(0, node, Msg::Begin);
        }
        let period = self.cfg.mining_period_ms;
        let miner = self.miner.node;
        self.schedule(period, miner, Msg::MineTick);
        let horizon = self.cfg.horizon();
        while let Some(ev) = self.net.next_event(horizon) {
            self.handle(ev.target, ev.payload);
        }
        self.finish()
    }

    fn pair_of_node(&self, node: NodeId) -> Option<(usize, usize)> {
        // (pair, role) with role 0 consumer, 1 producer, 2 meter.
        let n = node.0 as usize;
        if n == 0 || n > 3 * self.consumers.len() {
            return None;
        }
        Some(((n - 1) / 3, (n - 1) % 3))
    }

    fn handle(&mut self, target: NodeId, msg: Msg) {
        let now = self.net.now();
        match msg {
            Msg::Begin => self.begin(target),
            Msg::SendCtp { tid } => self.send_ctp(tid),
            Msg::CtpSubmit { tid, ctp } => {
                if target == self.miner.node {
                    let d = self.cfg.ctp_processing_ms + self.jitter();
                    let miner = self.miner.node;
                    self.schedule(d, miner, Msg::CtpProcessed { tid, ctp });
                }
            }
            Msg::CtpProcessed { tid, ctp } => self.store_ctp(tid, ctp),
            Msg::CtpStored { tid, ctp_id } => {
                let pair = self.trades[tid].pair;
                if target == self.consumers[pair].node {
                    self.consumer_step(tid, ConsumerEvent::Stored);
                    let expiry = self.trades[tid].ctp.as_ref().map_or(now, |c| c.expiry_time);
                    let node = self.consumers[pair].node;
                    self.net
                        .schedule(expiry.max(now), node, Msg::ExpiryTimer { tid })
                        .expect("future time");
                } else {
                    self.producer_funded(tid, Some(ctp_id));
                }
            }
            Msg::CtpRejected { tid, reason } => {
                if self.consumer_step(tid, ConsumerEvent::Rejected) {
                    log::info!("trade {tid} rejected: {reason}");
                    self.finish_trade(tid, now, TradeResult::Rejected);
                }
            }
            Msg::EnergyDelivered { tid } if self.protocol == Protocol::Baseline && self.trades[tid].finished.is_some() => {}
            Msg::EnergyDelivered { tid } => {
                let pair = self.trades[tid].pair;
                self.meter_step(pair, MeterEvent::EnergyDelivered);
                let g = self.cfg.tx_generation_ms;
                match self.protocol {
                    Protocol::Spb => self.schedule(g, target, Msg::SendErc { tid }),
                    Protocol::Baseline => {
                        let node = self.consumers[pair].node;
                        self.schedule(g, node, Msg::SendTx { tid, stage: BaselineStageTag(BaselineStage::Confirm) })
                    }
                }
            }
            Msg::SendErc { tid } => self.send_erc(tid),
            Msg::Forge { tid } => self.forge(tid),
            Msg::ErcSubmit { tid, erc, forged } => {
                let d = self.cfg.erc_processing_ms + self.jitter();
                let miner = self.miner.node;
                self.schedule(d, miner, Msg::ErcProcessed { tid, erc, forged });
            }
            Msg::ErcProcessed { tid, erc, forged } => self.settle(tid, *erc, forged),
            Msg::ExpiryTimer { tid } if self.protocol == Protocol::Baseline => {
                let t = &self.trades[tid];
                let confirmed = t.baseline.as_ref().is_some_and(|b| b.confirm_payout_tx.is_some());
                let (open, pair) = (t.finished.is_none() && !confirmed, t.pair);
                if open && self.consumer_step(tid, ConsumerEvent::ExpiryTimer) {
                    self.step(Some(tid), 4, &format!("consumer{pair}"), "abandons the trade; the escrow stays locked".into());
                    self.finish_trade(tid, now, TradeResult::Abandoned);
                }
            }
            Msg::ExpiryTimer { tid } => {
                if self.consumer_step(tid, ConsumerEvent::ExpiryTimer) {
                    let pair = self.trades[tid].pair;
                    let ctp_id = self.trades[tid].ctp.as_ref().expect("spb trade").id();
                    self.step(Some(tid), 5, &format!("consumer{pair}"), "sends a timeout request to the miner".into());
                    let (from, to) = (self.consumers[pair].node, self.miner.node);
                    self.unicast(from, to, Msg::TimeoutRequest { tid, ctp_id });
                }
            }
            Msg::TimeoutRequest { tid, ctp_id } => self.timeout_request(tid, ctp_id),
            Msg::TimeoutReply { tid, refunded } => {
                if refunded {
                    if self.consumer_step(tid, ConsumerEvent::Refunded) {
                        self.finish_trade(tid, now, TradeResult::ExpiredRefunded);
                    }
                } else {
                    self.consumer_step(tid, ConsumerEvent::TimeoutDenied);
                }
            }
            Msg::SendTx { tid, stage } => self.send_baseline_tx(tid, stage.0),
            Msg::TxSubmit { tx, .. } => {
                if target == self.miner.node {
                    if let Err(e) = self.miner.chain.submit_transaction(&self.miner.state, *tx) {
                        self.violations.push(format!("submission refused: {e}"));
                    }
                }
            }
            Msg::MineTick => self.mine_tick(),
            Msg::Block(a) => self.on_block(target, &a),
        }
    }

    fn begin(&mut self, node: NodeId) {
        let Some((pair, 0)) = self.pair_of_node(node) else { return };
        if self.trades.len() >= self.cfg.trades || self.consumers[pair].active.is_some() {
            return;
        }
        let tid = self.trades.len();
        let reliable = match self.reliability {
            Reliability::All => true,
            Reliability::None => false,
            Reliability::Random(p) => self.net.rng().gen_range(0..1000) >= p,
        };
        let forged = self.cfg.forged_erc_permille > 0 && self.net.rng().gen_range(0..1000) < self.cfg.forged_erc_permille;
        self.trades.push(Trade {
            pair,
            reliable,
            forged,
            started_at: self.net.now(),
            consumer_phase: ConsumerPhase::Idle,
            producer_phase: ProducerPhase::Listed,
            ctp: None,
            baseline: None,
            fees: 0,
            tx_count: 0,
            blocks: BTreeSet::new(),
            producer_received: 0,
            finished: None,
        });
        self.consumers[pair].active = Some(tid);
        self.consumers[pair].open.insert(tid);
        let g = self.cfg.tx_generation_ms;
        match self.protocol {
            Protocol::Spb => self.schedule(g, node, Msg::SendCtp { tid }),
            Protocol::Baseline => self.schedule(g, node, Msg::SendTx { tid, stage: BaselineStageTag(BaselineStage::Deploy) }),
        }
    }

    fn send_ctp(&mut self, tid: usize) {
        let pair = self.trades[tid].pair;
        let now = self.net.now();
        let c = &mut self.consumers[pair];
        let nonce = c.nonce;
        c.nonce += 1;
        let made = make_ctp(
            &c.keypair,
            self.producers[pair].address,
            self.cfg.amount,
            self.cfg.energy_per_trade,
            self.cfg.ttl_ms,
            now,
            nonce,
        );
        let ctp = match made {
            Ok(ctp) => ctp,
            Err(TradeError::ZeroTtl | TradeError::NonPositive | TradeError::Coe(_)) => {
                unreachable!("config validation rules these out")
            }
        };
        self.consumer_step(tid, ConsumerEvent::SendCtp);
        self.trades[tid].ctp = Some(ctp.clone());
        self.by_ctp.insert(ctp.id(), tid);
        self.step(
            Some(tid),
            2,
            &format!("consumer{pair}"),
            format!("broadcasts CTP {}: {} kWh for {}", ctp.id(), ctp.energy, ctp.amount),
        );
        let node = self.consumers[pair].node;
        self.net.broadcast(node, Msg::CtpSubmit { tid, ctp }).expect("known node");
    }

    fn store_ctp(&mut self, tid: usize, ctp: Ctp) {
        let now = self.net.now();
        let pair = self.trades[tid].pair;
        let m = &mut self.miner;
        let from = m.node;
        match m.store.insert_ctp(ctp, now, &mut m.state.ledger, &mut m.state.market) {
            Ok(id) => {
                let hash = self.miner.store.db_hash();
                self.step(Some(tid), 3, "miner", format!("stores CTP {id}; database digest now {hash}"));
                let (c, p) = (self.consumers[pair].node, self.producers[pair].node);
                self.unicast(from, c, Msg::CtpStored { tid, ctp_id: id });
                self.unicast(from, p, Msg::CtpStored { tid, ctp_id: id });
            }
            Err(e) => {
                let c = self.consumers[pair].node;
                self.unicast(from, c, Msg::CtpRejected { tid, reason: e.to_string() });
            }
        }
    }

    fn producer_funded(&mut self, tid: usize, ctp_id: Option<CtpId>) {
        let reliable = self.trades[tid].reliable;
        let pair = self.trades[tid].pair;
        self.producer_step(tid, ProducerEvent::Funded { reliable });
        let actor = format!("producer{pair}");
        let step = if self.protocol == Protocol::Spb { 4 } else { 3 };
        let t = self.cfg.transfer_ms;
        if reliable {
            self.step(Some(tid), step, &actor, "starts transferring energy to the consumer".into());
            let meter = self.meters[pair].node;
            self.schedule(t, meter, Msg::EnergyDelivered { tid });
        } else {
            self.step(Some(tid), step, &actor, "does not transfer energy".into());
        }
        if self.trades[tid].forged && ctp_id.is_some() {
            let adv = self.adversary;
            self.schedule(t, adv, Msg::Forge { tid });
        }
    }

    fn send_erc(&mut self, tid: usize) {
        let pair = self.trades[tid].pair;
        let ctp_id = self.trades[tid].ctp.as_ref().expect("spb trade").id();
        let energy = self.cfg.energy_per_trade;
        let erc = match make_erc(&mut self.meters[pair].identity, ctp_id, energy) {
            Ok(erc) => erc,
            Err(TradeError::Coe(crate::coe::CoeError::ExhaustedKeys(_))) => {
                let j = pick_other(self.net.rng(), self.meters.len(), pair);
                let signer = self.meters[j].identity.clone();
                refresh_certificate(&mut self.meters[pair].identity, &signer).expect("certified peer");
                make_erc(&mut self.meters[pair].identity, ctp_id, energy).expect("fresh keys")
            }
            Err(e) => panic!("meter {pair} cannot sign: {e}"),
        };
        self.meter_step(pair, MeterEvent::ReceiptReady);
        self.meters[pair].last_erc = Some(erc.clone());
        self.consumer_step(tid, ConsumerEvent::ErcSent);
        if self.cfg.pipelined {
            self.release(tid);
        }
        self.step(Some(tid), 5, &format!("meter{pair}"), format!("sends ERC for {ctp_id} to the miner"));
        let (from, to) = (self.meters[pair].node, self.miner.node);
        self.unicast(from, to, Msg::ErcSubmit { tid, erc: Box::new(erc), forged: false });
    }

    fn forge(&mut self, tid: usize) {
        let Some(ctp) = self.trades[tid].ctp.clone() else { return };
        let pair = self.trades[tid].pair;
        let seed = digest_parts(&[b"forge", &(tid as u64).to_le_bytes(), &self.cfg.seed.to_le_bytes()]).0;
        // Either a self-certified receipt or a genuine one re-targeted.
        let erc = match (self.net.rng().gen_bool(0.5), &self.meters[pair].last_erc) {
            (true, Some(prev)) => Erc {
                ctp_id: ctp.id(),
                ..prev.clone()
            },
            _ => forge_erc(seed, ctp.id(), ctp.energy),
        };
        self.forged_submitted += 1;
        let (from, to) = (self.adversary, self.miner.node);
        self.unicast(from, to, Msg::ErcSubmit { tid, erc: Box::new(erc), forged: true });
    }

    fn settle(&mut self, tid: usize, erc: Erc, forged: bool) {
        let now = self.net.now();
        let m = &mut self.miner;
        match m.contract.settle_erc(&mut m.store, &erc, now) {
            Ok((_, rec)) => {
                if forged {
                    self.violations.push(format!("trade {tid}: forged receipt accepted"));
                }
                let tx = Transaction::new(
                    rec.ctp.consumer,
                    self.cfg.fee,
                    0,
                    TxBody::SettledCtp {
                        ctp: rec.ctp,
                        call_data: vec![0x5C; self.cfg.settled_ctp_call_bytes],
                    },
                );
                self.by_tx.insert(tx.id, tid);
                if let Err(e) = self.miner.chain.submit_transaction(&self.miner.state, tx) {
                    self.violations.push(format!("trade {tid}: settlement refused: {e}"));
                }
            }
            Err(e) => {
                if forged {
                    self.forged_rejected += 1;
                    if !matches!(e, MarketError::BadCoE | MarketError::BadMeterSignature | MarketError::AlreadySettled(_)
                        | MarketError::CtpExpired(_) | MarketError::CtpNotFound(_)) {
                        self.violations.push(format!("trade {tid}: forged receipt rejected oddly: {e}"));
                    }
                } else {
                    log::info!("trade {tid}: receipt rejected: {e}");
                }
            }
        }
    }

    fn timeout_request(&mut self, tid: usize, ctp_id: CtpId) {
        let now = self.net.now();
        let pair = self.trades[tid].pair;
        let m = &mut self.miner;
        let from = m.node;
        let refunded = match m.store.timeout_request(&ctp_id, now, &mut m.state.ledger, &mut m.state.market) {
            Ok(TimeoutOutcome::Refunded) => {
                let hash = self.miner.store.db_hash();
                self.step(Some(tid), 6, "miner", format!("removes CTP {ctp_id} and refunds; database digest now {hash}"));
                true
            }
            Ok(TimeoutOutcome::AlreadyRefunded) => true,
            Err(e) => {
                log::info!("trade {tid}: timeout denied: {e}");
                false
            }
        };
        let to = self.consumers[pair].node;
        self.unicast(from, to, Msg::TimeoutReply { tid, refunded });
    }

    fn send_baseline_tx(&mut self, tid: usize, stage: BaselineStage) {
        let pair = self.trades[tid].pair;
        let fee = self.cfg.fee;
        let sizes = self.sizes();
        let now = self.net.now();
        let c = &mut self.consumers[pair];
        let nonce = c.nonce;
        c.nonce += 1;
        let consumer = c.keypair.address();
        let (tx, step, action) = match stage {
            BaselineStage::Deploy => {
                let (trade, tx) = BaselineTrade::start(
                    consumer,
                    self.producers[pair].address,
                    self.cfg.amount,
                    self.cfg.energy_per_trade,
                    fee,
                    nonce,
                    &sizes,
                    now,
                );
                self.trades[tid].baseline = Some(trade);
                self.consumer_step(tid, ConsumerEvent::SendCtp);
                (tx, 1, "deploys an escrow contract")
            }
            BaselineStage::PayIn => {
                let tx = self.trades[tid].baseline.as_mut().expect("deployed").pay_in(fee, nonce, &sizes);
                (tx, 2, "pays the price into the escrow contract")
            }
            BaselineStage::Confirm => {
                let tx = self.trades[tid].baseline.as_mut().expect("deployed").confirm(fee, nonce, &sizes);
                self.meter_step(pair, MeterEvent::ReceiptReady);
                self.consumer_step(tid, ConsumerEvent::ErcSent);
                if self.cfg.pipelined {
                    self.release(tid);
                }
                (tx, 4, "confirms receipt, releasing the escrow")
            }
        };
        self.by_tx.insert(tx.id, tid);
        self.step(Some(tid), step, &format!("consumer{pair}"), format!("{action} ({})", tx.id));
        let node = self.consumers[pair].node;
        self.net.broadcast(node, Msg::TxSubmit { tid, tx: Box::new(tx) }).expect("known node");
    }

    fn all_done(&self) -> bool {
        self.trades.len() >= self.cfg.trades
            && self.trades.iter().all(|t| t.finished.is_some())
            && self.miner.chain.mempool().is_empty()
            && self.miner.chain.tip().header.ctp_db_hash == self.miner.store.db_hash()
    }

    fn mine_tick(&mut self) {
        let now = self.net.now();
        let m = &mut self.miner;
        let swept = m.store.sweep_expired(now, &mut m.state.ledger, &mut m.state.market);
        for id in swept {
            if let Some(&tid) = self.by_ctp.get(&id) {
                self.step(Some(tid), 6, "miner", format!("expiry sweep removes CTP {id} and refunds"));
            }
        }
        let m = &mut self.miner;
        let out = m.chain.mine_tick(&mut m.state, now, m.store.db_hash());
        for d in &out.dropped {
            self.violations.push(format!("transaction {} dropped: {}", d.tx.id, d.error));
        }
        if let Some(block) = out.block {
            let height = block.header.height;
            let mut settled = Vec::new();
            for tx in &block.txs {
                if let TxBody::SettledCtp { ctp, .. } = &tx.body {
                    self.miner.store.mark_captured(&ctp.id());
                    settled.push(ctp.id());
                }
                let Some(&tid) = self.by_tx.get(&tx.id) else { continue };
                let t = &mut self.trades[tid];
                t.fees += tx.fee;
                t.tx_count += 1;
                t.blocks.insert(height);
                match &tx.body {
                    TxBody::SettledCtp { ctp, .. } => {
                        t.producer_received += ctp.amount;
                        let pair = t.pair;
                        self.step(
                            Some(tid),
                            6,
                            "miner",
                            format!("verified the ERC; SettledCtp {} stored in block {height}", tx.id),
                        );
                        log::debug!("pair {pair} settled in block {height}");
                    }
                    TxBody::BaselineConfirmPayout { .. } => {
                        t.producer_received += self.cfg.amount;
                    }
                    _ => {}
                }
            }
            self.miner.store.set_epoch(self.miner.chain.next_height());
            self.check_invariants(height);
            let announce = Arc::new(Announce {
                height,
                timestamp: now,
                tx_ids: block.tx_ids(),
                settled,
            });
            let from = self.miner.node;
            self.net.broadcast(from, Msg::Block(announce)).expect("known node");
        }
        if self.all_done() {
            self.ticking = false;
        }
        if self.ticking {
            let (p, miner) = (self.cfg.mining_period_ms, self.miner.node);
            self.schedule(p, miner, Msg::MineTick);
        }
    }

    fn check_invariants(&mut self, height: u64) {
        let s = &self.miner.state;
        if s.ledger.total_supply() != self.supply {
            self.violations.push(format!("block {height}: currency supply changed"));
        }
        if s.ledger.total_held() != self.miner.store.held_amount() {
            self.violations.push(format!("block {height}: held funds differ from open CTPs"));
        }
    }

    fn on_block(&mut self, node: NodeId, a: &Announce) {
        let Some((pair, role)) = self.pair_of_node(node) else { return };
        let open: Vec<usize> = self.consumers[pair].open.iter().copied().collect();
        for tid in open {
            self.on_block_for(node, role, tid, a);
        }
    }

    fn on_block_for(&mut self, node: NodeId, role: usize, tid: usize, a: &Announce) {
        match (self.protocol, role) {
            (Protocol::Spb, 0) => {
                let ctp_id = self.trades[tid].ctp.as_ref().map(|c| c.id());
                if ctp_id.is_some_and(|id| a.settled.contains(&id)) && self.consumer_step(tid, ConsumerEvent::Included) {
                    self.finish_trade(tid, a.timestamp, TradeResult::SettledPaid);
                }
            }
            (Protocol::Baseline, 0) => {
                let Some(b) = self.trades[tid].baseline.as_mut() else { return };
                let g = self.cfg.tx_generation_ms;
                if a.tx_ids.contains(&b.contract_tx) && b.phase == EscrowPhase::Deployed && b.pay_in_tx.is_none() {
                    self.schedule(g, node, Msg::SendTx { tid, stage: BaselineStageTag(BaselineStage::PayIn) });
                } else if b.pay_in_tx.is_some_and(|id| a.tx_ids.contains(&id)) {
                    b.advance(EscrowPhase::Paid);
                    let deadline = a.timestamp + self.cfg.ttl_ms;
                    self.net
                        .schedule(deadline.max(self.net.now()), node, Msg::ExpiryTimer { tid })
                        .expect("future time");
                } else if b.confirm_payout_tx.is_some_and(|id| a.tx_ids.contains(&id)) {
                    b.advance(EscrowPhase::Confirmed);
                    if self.consumer_step(tid, ConsumerEvent::Included) {
                        self.finish_trade(tid, a.timestamp, TradeResult::SettledPaid);
                    }
                }
            }
            (Protocol::Baseline, 1) => {
                let paid = self.trades[tid]
                    .baseline
                    .as_ref()
                    .and_then(|b| b.pay_in_tx)
                    .is_some_and(|id| a.tx_ids.contains(&id));
                if paid {
                    self.producer_funded(tid, None);
                }
            }
            _ => {}
        }
    }

    fn finish_trade(&mut self, tid: usize, at: SimTime, result: TradeResult) {
        let t = &mut self.trades[tid];
        if t.finished.is_some() {
            return;
        }
        t.finished = Some((at, result));
        let pair = t.pair;
        self.consumers[pair].open.remove(&tid);
        self.release(tid);
    }

    /// Let the trade's consumer start its next one.
    fn release(&mut self, tid: usize) {
        let pair = self.trades[tid].pair;
        if self.consumers[pair].active == Some(tid) {
            self.consumers[pair].active = None;
            let node = self.consumers[pair].node;
            self.schedule(0, node, Msg::Begin);
        }
    }

    fn finish(mut self) -> RunOutput {
        let end_time = self.net.now();
        for (tid, t) in self.trades.iter().enumerate() {
            if t.finished.is_none() {
                self.violations.push(format!("trade {tid} did not finish by {end_time} ms"));
            }
        }
        if self.trades.len() < self.cfg.trades {
            self.violations.push(format!("only {} of {} trades started", self.trades.len(), self.cfg.trades));
        }
        self.final_atomicity_checks();
        let transfer = self.cfg.transfer_ms;
        let outcomes: Vec<TradeOutcome> = self
            .trades
            .iter()
            .enumerate()
            .filter_map(|(tid, t)| {
                let (at, result) = t.finished?;
                let transferred = result == TradeResult::SettledPaid && t.reliable;
                let elapsed = at - t.started_at;
                Some(TradeOutcome {
                    trade: tid,
                    protocol: self.protocol,
                    reliable: t.reliable,
                    ctp_id: t.ctp.as_ref().map(|c| c.id()).or(t.baseline.as_ref().map(|b| b.contract_tx)),
                    result,
                    consumer_fee_paid: t.fees,
                    producer_received: t.producer_received,
                    e2e_delay_ms: if transferred { elapsed.saturating_sub(transfer) } else { elapsed },
                    onchain_tx_count: t.tx_count,
                    inclusions: t.blocks.len(),
                    started_at: t.started_at,
                    finished_at: at,
                })
            })
            .collect();
        let fee_reserve = match self.protocol {
            Protocol::Spb => self.cfg.fee,
            Protocol::Baseline => 0,
        };
        let verdict = self
            .miner
            .chain
            .validate(self.miner.store.journal(), fee_reserve, Some(&self.miner.state));
        if !verdict.ok {
            self.violations.push(format!(
                "chain validation: {}",
                verdict.first_violation.clone().unwrap_or_default()
            ));
        }
        RunOutput {
            protocol: self.protocol,
            outcomes,
            steps: self.steps,
            settlements: self.miner.contract.settlements().count(),
            chain: self.miner.chain,
            state: self.miner.state,
            store: self.miner.store,
            verdict,
            violations: self.violations,
            trace_digest: self.net.trace_digest(),
            event_trace: self.net.trace_lines(),
            messages_sent: self.net.messages_sent(),
            forged_submitted: self.forged_submitted,
            forged_rejected: self.forged_rejected,
            end_time,
        }
    }

    fn final_atomicity_checks(&mut self) {
        let store = &self.miner.store;
        let state = &self.miner.state;
        for rec in store.records() {
            let paid = state.settled.contains(&rec.id);
            let ok = match rec.status {
                CtpStatus::Settled => paid && self.miner.contract.settlement(&rec.id).is_some(),
                CtpStatus::Expired => !paid,
                CtpStatus::Pending => false,
            };
            if !ok {
                self.violations
                    .push(format!("ctp {} ended {:?} with paid={paid}", rec.id, rec.status));
            }
        }
        if store.awaiting_capture().next().is_some() {
            self.violations.push("settled CTPs left uncaptured".into());
        }
        for (tid, t) in self.trades.iter().enumerate() {
            let Some((_, result)) = t.finished else { continue };
            let expect_paid = if result == TradeResult::SettledPaid { self.cfg.amount } else { 0 };
            if t.producer_received != expect_paid {
                self.violations.push(format!(
                    "trade {tid}: {result:?} but producer received {}",
                    t.producer_received
                ));
            }
            if result == TradeResult::SettledPaid && !t.reliable {
                self.violations.push(format!("trade {tid}: paid without delivery"));
            }
        }
        for c in &self.consumers {
            if state.ledger.held(&c.keypair.address()) != 0 {
                self.violations.push(format!("consumer {} still has funds on hold", c.keypair.address()));
            }
        }
    }
}

fn pick_other<R: Rng>(rng: &mut R, n: usize, me: usize) -> usize {
    let j = rng.gen_range(0..n - 1);
    if j >= me {
        j + 1
    } else {
        j
    }
}

/// Run one simulated deployment.
pub fn simulate(cfg: &ExperimentConfig, protocol: Protocol, reliability: Reliability) -> Result<RunOutput, SetupError> {
    Ok(World::new(cfg, protocol, reliability)?.run())
}
