//! Single-miner account chain.
//!
//! ```text
//! header = parent_hash[32] tx_root[32] ctp_db_hash[32] height[u64] timestamp[u64] miner[20]
//! block  = header count[u64] bytes(tx)*
//! ```
//!
//! A tick produces a block when transactions are pending or when the CTP
//! database digest differs from the one in the tip header.

use std::collections::{BTreeSet, HashSet, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::baseline::{EscrowBook, EscrowError};
use crate::codec::Writer;
use crate::crypto::{digest, Address, Hash};
use crate::ctp::{CtpId, CtpStore, JournalEntry};
use crate::ledger::{Ledger, LedgerError};
use crate::market::{EnergyMarket, MarketError};
use crate::merkle::merkle_root;
use crate::sim::SimTime;
use crate::tx::{Transaction, TxBody, TxKind};

pub const DEFAULT_BLOCK_CAPACITY: usize = 8;
pub const DEFAULT_FEE: u64 = 20;
pub const DEFAULT_MINING_PERIOD_MS: SimTime = 15_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SubmitError {
    #[error("duplicate transaction {0}")]
    DuplicateTx(Hash),
    #[error("unknown sender {0}")]
    UnknownAccount(Address),
    #[error("fee {got} differs from the configured {expected}")]
    WrongFee { expected: u64, got: u64 },
    #[error("transaction id or size does not match its content")]
    Malformed,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApplyError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Escrow(#[from] EscrowError),
    #[error("settlement sender {sender} is not the ctp consumer")]
    SenderMismatch { sender: Address },
    #[error("ctp signature does not verify")]
    BadCtpSignature,
    #[error("ctp {0} already settled on chain")]
    AlreadySettled(CtpId),
}

/// Everything transactions can touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainState {
    pub ledger: Ledger,
    pub market: EnergyMarket,
    pub escrows: EscrowBook,
    pub settled: BTreeSet<CtpId>,
}

impl ChainState {
    pub fn new(ledger: Ledger, market: EnergyMarket) -> Self {
        Self {
            ledger,
            market,
            escrows: EscrowBook::default(),
            settled: BTreeSet::new(),
        }
    }
}

/// Apply `tx` atomically: on error `state` is unchanged.
pub fn apply_transaction(state: &mut ChainState, tx: &Transaction, miner: &Address) -> Result<(), ApplyError> {
    let mut s = state.clone();
    apply_in_place(&mut s, tx, miner)?;
    *state = s;
    Ok(())
}

fn apply_in_place(s: &mut ChainState, tx: &Transaction, miner: &Address) -> Result<(), ApplyError> {
    s.ledger.transfer(&tx.sender, miner, tx.fee)?;
    match &tx.body {
        TxBody::ContractDeploy { .. } => {}
        TxBody::EnergyAdd {
            energy,
            price_per_kwh,
            ..
        } => s.market.add_energy(&tx.sender, *energy, *price_per_kwh)?,
        TxBody::SettledCtp { ctp, .. } => {
            if tx.sender != ctp.consumer {
                return Err(ApplyError::SenderMismatch { sender: tx.sender });
            }
            if !ctp.verify_signature(&s.ledger) {
                return Err(ApplyError::BadCtpSignature);
            }
            let id = ctp.id();
            if !s.settled.insert(id) {
                return Err(ApplyError::AlreadySettled(id));
            }
            s.ledger.capture_hold(&ctp.consumer, &ctp.producer, ctp.amount)?;
            s.market.consume_reserved(&ctp.producer, ctp.energy)?;
        }
        TxBody::BaselineDeploy {
            producer,
            amount,
            energy,
            ..
        } => {
            s.escrows
                .deploy(&mut s.ledger, &mut s.market, tx.id, tx.sender, *producer, *amount, *energy)?;
        }
        TxBody::BaselinePayIn { contract, amount, .. } => {
            s.escrows.pay_in(&mut s.ledger, contract, &tx.sender, *amount)?;
        }
        TxBody::BaselineConfirmPayout { contract, .. } => {
            s.escrows.confirm(&mut s.ledger, &mut s.market, contract, &tx.sender)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockHeader {
    pub parent_hash: Hash,
    pub tx_root: Hash,
    pub ctp_db_hash: Hash,
    pub height: u64,
    pub timestamp: SimTime,
    pub miner: Address,
}

impl BlockHeader {
    pub const ENCODED_LEN: usize = 32 * 3 + 8 + 8 + 20;

    pub fn encode(&self, w: &mut Writer) {
        w.fixed(&self.parent_hash.0)
            .fixed(&self.tx_root.0)
            .fixed(&self.ctp_db_hash.0)
            .u64(self.height)
            .u64(self.timestamp)
            .fixed(&self.miner.0);
    }

    pub fn hash(&self) -> Hash {
        let mut w = Writer::new();
        self.encode(&mut w);
        digest(&w.finish())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub txs: Vec<Transaction>,
}

impl Block {
    pub fn canonical(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.header.encode(&mut w);
        w.u64(self.txs.len() as u64);
        for tx in &self.txs {
            w.bytes(&tx.canonical());
        }
        w.finish()
    }

    pub fn byte_size(&self) -> usize {
        BlockHeader::ENCODED_LEN + 8 + self.txs.iter().map(|t| 4 + t.byte_size).sum::<usize>()
    }

    pub fn hash(&self) -> Hash {
        self.header.hash()
    }

    pub fn tx_ids(&self) -> Vec<Hash> {
        self.txs.iter().map(|t| t.id).collect()
    }
}

pub fn tx_root(txs: &[Transaction]) -> Hash {
    merkle_root(&txs.iter().map(|t| t.id).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainParams {
    pub capacity: usize,
    pub fee: u64,
    pub miner: Address,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dropped {
    pub tx: Transaction,
    pub error: ApplyError,
}

#[derive(Debug, Clone, Default)]
pub struct MineOutcome {
    pub block: Option<Block>,
    pub dropped: Vec<Dropped>,
}

#[derive(Debug, Clone, Default)]
pub struct Mempool {
    queue: VecDeque<Transaction>,
    seen: HashSet<Hash>,
}

impl Mempool {
    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transaction> {
        self.queue.iter()
    }
}

#[derive(Debug, Clone)]
pub struct Chain {
    params: ChainParams,
    blocks: Vec<Block>,
    mempool: Mempool,
    pre_genesis: ChainState,
    size_bytes: u64,
}

impl Chain {
    /// Apply `genesis_txs` to `state` and seal them into block 0.
    pub fn genesis(
        params: ChainParams,
        state: &mut ChainState,
        genesis_txs: Vec<Transaction>,
        ctp_db_hash: Hash,
    ) -> Result<Self, ApplyError> {
        let pre_genesis = state.clone();
        for tx in &genesis_txs {
            apply_transaction(state, tx, &params.miner)?;
        }
        let header = BlockHeader {
            parent_hash: Hash::ZERO,
            tx_root: tx_root(&genesis_txs),
            ctp_db_hash,
            height: 0,
            timestamp: 0,
            miner: params.miner,
        };
        let mut mempool = Mempool::default();
        mempool.seen.extend(genesis_txs.iter().map(|t| t.id));
        let block = Block {
            header,
            txs: genesis_txs,
        };
        let size_bytes = block.byte_size() as u64;
        Ok(Self {
            params,
            blocks: vec![block],
            mempool,
            pre_genesis,
            size_bytes,
        })
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("genesis present")
    }

    pub fn height(&self) -> u64 {
        self.tip().header.height
    }

    pub fn next_height(&self) -> u64 {
        self.height() + 1
    }

    pub fn mempool(&self) -> &Mempool {
        &self.mempool
    }

    pub fn pre_genesis(&self) -> &ChainState {
        &self.pre_genesis
    }

    pub fn chain_size_bytes(&self) -> u64 {
        self.size_bytes
    }

    pub fn tx_count(&self) -> usize {
        self.blocks.iter().map(|b| b.txs.len()).sum()
    }

    pub fn count_kind(&self, kind: TxKind) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| &b.txs)
            .filter(|t| t.kind() == kind)
            .count()
    }

    pub fn submit_transaction(&mut self, state: &ChainState, tx: Transaction) -> Result<Hash, SubmitError> {
        if !tx.is_consistent() {
            return Err(SubmitError::Malformed);
        }
        if tx.fee != self.params.fee {
            return Err(SubmitError::WrongFee {
                expected: self.params.fee,
                got: tx.fee,
            });
        }
        if self.mempool.seen.contains(&tx.id) {
            return Err(SubmitError::DuplicateTx(tx.id));
        }
        if !state.ledger.contains(&tx.sender) {
            return Err(SubmitError::UnknownAccount(tx.sender));
        }
        let id = tx.id;
        self.mempool.seen.insert(id);
        self.mempool.queue.push_back(tx);
        Ok(id)
    }

    pub fn mine_tick(&mut self, state: &mut ChainState, now: SimTime, ctp_db_hash: Hash) -> MineOutcome {
        let db_changed = ctp_db_hash != self.tip().header.ctp_db_hash;
        if self.mempool.is_empty() && !db_changed {
            return MineOutcome::default();
        }
        let take = self.mempool.len().min(self.params.capacity);
        let mut txs = Vec::with_capacity(take);
        let mut dropped = Vec::new();
        for tx in self.mempool.queue.drain(..take) {
            match apply_transaction(state, &tx, &self.params.miner) {
                Ok(()) => txs.push(tx),
                Err(error) => {
                    log::warn!("dropping {} from block: {error}", tx.id);
                    dropped.push(Dropped { tx, error });
                }
            }
        }
        if txs.is_empty() && !db_changed {
            return MineOutcome { block: None, dropped };
        }
        let header = BlockHeader {
            parent_hash: self.tip().hash(),
            tx_root: tx_root(&txs),
            ctp_db_hash,
            height: self.next_height(),
            timestamp: now,
            miner: self.params.miner,
        };
        let block = Block { header, txs };
        self.size_bytes += block.byte_size() as u64;
        self.blocks.push(block.clone());
        MineOutcome {
            block: Some(block),
            dropped,
        }
    }

    pub fn export_jsonl(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&serde_json::to_string(&BlockSummary::of(b)).expect("plain data serializes"));
            out.push('\n');
        }
        out
    }

    /// Replay from the pre-genesis state and compare against `live`.
    pub fn validate(&self, journal: &[JournalEntry], fee_reserve: u64, live: Option<&ChainState>) -> Verdict {
        validate_chain(&self.pre_genesis, &self.blocks, journal, &self.params, fee_reserve, live)
    }
}

#[derive(Debug, Serialize)]
pub struct BlockSummary {
    pub height: u64,
    pub hash: Hash,
    pub parent_hash: Hash,
    pub tx_root: Hash,
    pub ctp_db_hash: Hash,
    pub timestamp: SimTime,
    pub miner: Address,
    pub tx_ids: Vec<Hash>,
    pub tx_kinds: Vec<TxKind>,
    pub byte_size: usize,
}

impl BlockSummary {
    pub fn of(b: &Block) -> Self {
        Self {
            height: b.header.height,
            hash: b.hash(),
            parent_hash: b.header.parent_hash,
            tx_root: b.header.tx_root,
            ctp_db_hash: b.header.ctp_db_hash,
            timestamp: b.header.timestamp,
            miner: b.header.miner,
            tx_ids: b.tx_ids(),
            tx_kinds: b.txs.iter().map(|t| t.kind()).collect(),
            byte_size: b.byte_size(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub ok: bool,
    pub first_violation: Option<String>,
}

impl Verdict {
    fn fail(msg: String) -> Self {
        Self {
            ok: false,
            first_violation: Some(msg),
        }
    }
}

pub fn validate_chain(
    pre_genesis: &ChainState,
    blocks: &[Block],
    journal: &[JournalEntry],
    params: &ChainParams,
    fee_reserve: u64,
    live: Option<&ChainState>,
) -> Verdict {
    let mut state = pre_genesis.clone();
    let mut store = CtpStore::new(fee_reserve);
    let mut ops = journal.iter().peekable();
    let mut parent = Hash::ZERO;
    let mut last_time = 0;
    for (i, b) in blocks.iter().enumerate() {
        let h = &b.header;
        let height = i as u64;
        while let Some(e) = ops.next_if(|e| e.epoch <= height) {
            if let Err(err) = store.apply_op(&e.op, &mut state.ledger, &mut state.market) {
                return Verdict::fail(format!("journal op before block {height} fails: {err}"));
            }
        }
        if h.height != height {
            return Verdict::fail(format!("block {i} claims height {}", h.height));
        }
        if h.parent_hash != parent {
            return Verdict::fail(format!("block {height} does not link to its parent"));
        }
        if h.timestamp < last_time {
            return Verdict::fail(format!("block {height} timestamp goes backwards"));
        }
        if height > 0 && b.txs.len() > params.capacity {
            return Verdict::fail(format!("block {height} exceeds capacity"));
        }
        if let Some(bad) = b.txs.iter().find(|t| !t.is_consistent()) {
            return Verdict::fail(format!("block {height} tx {} does not match its content", bad.id));
        }
        if h.tx_root != tx_root(&b.txs) {
            return Verdict::fail(format!("block {height} tx_root mismatch"));
        }
        if h.ctp_db_hash != store.db_hash() {
            return Verdict::fail(format!("block {height} ctp_db_hash differs from replayed database"));
        }
        for tx in &b.txs {
            if tx.fee != params.fee {
                return Verdict::fail(format!("block {height} tx {} pays fee {}", tx.id, tx.fee));
            }
            if let Err(err) = apply_transaction(&mut state, tx, &h.miner) {
                return Verdict::fail(format!("block {height} tx {} fails on replay: {err}", tx.id));
            }
            if let TxBody::SettledCtp { ctp, .. } = &tx.body {
                store.mark_captured(&ctp.id());
            }
        }
        parent = b.hash();
        last_time = h.timestamp;
    }
    for e in ops {
        if let Err(err) = store.apply_op(&e.op, &mut state.ledger, &mut state.market) {
            return Verdict::fail(format!("trailing journal op fails: {err}"));
        }
    }
    if let Some(live) = live {
        if state != *live {
            return Verdict::fail("replayed state differs from live state".into());
        }
    }
    Verdict {
        ok: true,
        first_violation: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keypair_from_label, KeyPair};
    use crate::ctp::Ctp;
    use crate::market::AccountMode;

    struct Fixture {
        state: ChainState,
        chain: Chain,
        store: CtpStore,
        consumer: KeyPair,
        producer: Address,
        miner: Address,
    }

    fn fixture(capacity: usize) -> Fixture {
        let consumer = keypair_from_label(b"consumer");
        let mut ledger = Ledger::new();
        ledger.open_keyed(consumer.public_key, 1_000).unwrap();
        let producer = ledger.open_keyed(keypair_from_label(b"producer").public_key, 100).unwrap();
        let miner = keypair_from_label(b"miner").address();
        ledger.open(miner, 0).unwrap();
        let mut market = EnergyMarket::new(keypair_from_label(b"authority").public_key);
        market.create_energy_account(&mut ledger, producer, AccountMode::Burn(10)).unwrap();
        let mut state = ChainState::new(ledger, market);
        let store = CtpStore::new(DEFAULT_FEE);
        let add = Transaction::new(
            producer,
            DEFAULT_FEE,
            0,
            TxBody::EnergyAdd { energy: 1_000, price_per_kwh: 1, call_data: vec![] },
        );
        let params = ChainParams { capacity, fee: DEFAULT_FEE, miner };
        let chain = Chain::genesis(params, &mut state, vec![add], store.db_hash()).unwrap();
        let mut store = store;
        store.set_epoch(1);
        Fixture { state, chain, store, consumer, producer, miner }
    }

    impl Fixture {
        fn deploy(&self, nonce: u64) -> Transaction {
            Transaction::new(self.consumer.address(), DEFAULT_FEE, nonce, TxBody::ContractDeploy { code: vec![0; 4] })
        }

        fn tick(&mut self, now: SimTime) -> MineOutcome {
            self.store.sweep_expired(now, &mut self.state.ledger, &mut self.state.market);
            let out = self.chain.mine_tick(&mut self.state, now, self.store.db_hash());
            if let Some(b) = &out.block {
                for tx in &b.txs {
                    if let TxBody::SettledCtp { ctp, .. } = &tx.body {
                        self.store.mark_captured(&ctp.id());
                    }
                }
                self.store.set_epoch(self.chain.next_height());
            }
            out
        }

        fn validate(&self) -> Verdict {
            self.chain.validate(self.store.journal(), DEFAULT_FEE, Some(&self.state))
        }
    }

    #[test]
    fn submitted_tx_is_mined_next_tick() {
        let mut f = fixture(8);
        let tx = f.deploy(1);
        let id = f.chain.submit_transaction(&f.state, tx.clone()).unwrap();
        assert_eq!(f.chain.submit_transaction(&f.state, tx), Err(SubmitError::DuplicateTx(id)));
        let b = f.tick(15_000).block.unwrap();
        assert_eq!(b.tx_ids(), vec![id]);
        assert_eq!(b.header.height, 1);
        assert_eq!(b.header.parent_hash, f.chain.blocks()[0].hash());
    }

    #[test]
    fn submit_rejections() {
        let mut f = fixture(8);
        let ghost = Transaction::new(Address([9; 20]), DEFAULT_FEE, 0, TxBody::ContractDeploy { code: vec![] });
        assert_eq!(
            f.chain.submit_transaction(&f.state, ghost),
            Err(SubmitError::UnknownAccount(Address([9; 20])))
        );
        let cheap = Transaction::new(f.consumer.address(), 1, 0, TxBody::ContractDeploy { code: vec![] });
        assert_eq!(
            f.chain.submit_transaction(&f.state, cheap),
            Err(SubmitError::WrongFee { expected: 20, got: 1 })
        );
        let mut bent = f.deploy(3);
        bent.nonce = 4;
        assert_eq!(f.chain.submit_transaction(&f.state, bent), Err(SubmitError::Malformed));
    }

    #[test]
    fn fifo_with_capacity() {
        let mut f = fixture(5);
        let ids: Vec<Hash> = (0..7)
            .map(|i| f.chain.submit_transaction(&f.state, f.deploy(i)).unwrap())
            .collect();
        let b1 = f.tick(15_000).block.unwrap();
        let b2 = f.tick(30_000).block.unwrap();
        assert_eq!(b1.tx_ids(), ids[..5].to_vec());
        assert_eq!(b2.tx_ids(), ids[5..].to_vec());
        assert!(f.tick(45_000).block.is_none());
    }

    #[test]
    fn empty_mempool_and_unchanged_db_mine_nothing() {
        let mut f = fixture(8);
        assert!(f.tick(15_000).block.is_none());
        assert_eq!(f.chain.height(), 0);
    }

    #[test]
    fn db_change_alone_produces_a_block() {
        let mut f = fixture(8);
        let ctp = Ctp::signed(&f.consumer, f.producer, 40, 50, 60_000, [1; 8]);
        f.store.insert_ctp(ctp, 100, &mut f.state.ledger, &mut f.state.market).unwrap();
        let b = f.tick(15_000).block.unwrap();
        assert!(b.txs.is_empty());
        assert_eq!(b.header.ctp_db_hash, f.store.db_hash());
        assert!(f.validate().ok);
    }

    #[test]
    fn settled_ctp_moves_money_and_fee() {
        let mut f = fixture(8);
        let c = f.consumer.address();
        let ctp = Ctp::signed(&f.consumer, f.producer, 40, 50, 60_000, [1; 8]);
        let id = f.store.insert_ctp(ctp.clone(), 100, &mut f.state.ledger, &mut f.state.market).unwrap();
        f.store.take_for_settlement(&id, 200).unwrap();
        let before_p = f.state.ledger.available(&f.producer);
        let before_c = f.state.ledger.get(&c).unwrap();
        let tx = Transaction::new(c, DEFAULT_FEE, 0, TxBody::SettledCtp { ctp, call_data: vec![] });
        f.chain.submit_transaction(&f.state, tx).unwrap();
        let supply = f.state.ledger.total_supply();
        f.tick(15_000).block.unwrap();
        let after_c = f.state.ledger.get(&c).unwrap();
        assert_eq!(before_c.held - after_c.held, 40);
        assert_eq!(before_c.available - after_c.available, 20);
        assert_eq!(f.state.ledger.available(&f.producer) - before_p, 40);
        assert_eq!(f.state.ledger.available(&f.miner), 20 + 20);
        assert_eq!(f.state.ledger.total_supply(), supply);
        assert!(f.validate().ok);
    }

    #[test]
    fn unaffordable_tx_is_dropped_and_reported() {
        let mut f = fixture(8);
        let poor = keypair_from_label(b"poor");
        let mut pre = f.chain.pre_genesis().clone();
        pre.ledger.open_keyed(poor.public_key, 5).unwrap();
        f.state.ledger.open_keyed(poor.public_key, 5).unwrap();
        f.chain.pre_genesis = pre;
        let tx = Transaction::new(poor.address(), DEFAULT_FEE, 0, TxBody::ContractDeploy { code: vec![] });
        f.chain.submit_transaction(&f.state, tx).unwrap();
        let out = f.tick(15_000);
        assert!(out.block.is_none());
        assert_eq!(out.dropped.len(), 1);
        assert!(matches!(out.dropped[0].error, ApplyError::Ledger(LedgerError::InsufficientFunds { .. })));
        assert_eq!(f.state.ledger.available(&poor.address()), 5);
    }

    #[test]
    fn double_settlement_rejected_on_chain() {
        let mut f = fixture(8);
        let c = f.consumer.address();
        let ctp = Ctp::signed(&f.consumer, f.producer, 40, 50, 60_000, [1; 8]);
        f.store.insert_ctp(ctp.clone(), 100, &mut f.state.ledger, &mut f.state.market).unwrap();
        for nonce in 0..2 {
            let tx = Transaction::new(c, DEFAULT_FEE, nonce, TxBody::SettledCtp { ctp: ctp.clone(), call_data: vec![] });
            f.chain.submit_transaction(&f.state, tx).unwrap();
        }
        let out = f.tick(15_000);
        assert_eq!(out.block.unwrap().txs.len(), 1);
        assert_eq!(out.dropped[0].error, ApplyError::AlreadySettled(ctp.id()));
    }

    #[test]
    fn size_is_additive() {
        let mut f = fixture(8);
        let genesis = f.chain.chain_size_bytes();
        assert_eq!(genesis as usize, f.chain.blocks()[0].canonical().len());
        f.chain.submit_transaction(&f.state, f.deploy(1)).unwrap();
        let b = f.tick(15_000).block.unwrap();
        assert_eq!(f.chain.chain_size_bytes(), genesis + b.canonical().len() as u64);
        assert_eq!(b.byte_size(), b.canonical().len());
    }

    #[test]
    fn tampering_is_detected() {
        let mut f = fixture(8);
        for i in 0..3 {
            f.chain.submit_transaction(&f.state, f.deploy(i)).unwrap();
        }
        f.tick(15_000);
        assert!(f.validate().ok);

        let mut bad = f.chain.clone();
        if let TxBody::ContractDeploy { code } = &mut bad.blocks[1].txs[1].body {
            code[0] ^= 1;
        }
        let v = bad.validate(f.store.journal(), DEFAULT_FEE, None);
        assert!(!v.ok);
        assert!(v.first_violation.unwrap().contains("does not match"));

        let mut relinked = f.chain.clone();
        relinked.blocks[1].header.parent_hash = Hash([1; 32]);
        assert!(!relinked.validate(f.store.journal(), DEFAULT_FEE, None).ok);

        let mut rehashed = f.chain.clone();
        rehashed.blocks[1].header.ctp_db_hash = Hash([1; 32]);
        assert!(!rehashed.validate(f.store.journal(), DEFAULT_FEE, None).ok);
    }

    #[test]
    fn live_state_divergence_detected() {
        let mut f = fixture(8);
        f.chain.submit_transaction(&f.state, f.deploy(1)).unwrap();
        f.tick(15_000);
        let mut live = f.state.clone();
        live.ledger.burn(&f.consumer.address(), 1).unwrap();
        assert!(!f.chain.validate(f.store.journal(), DEFAULT_FEE, Some(&live)).ok);
    }

    #[test]
    fn export_has_one_line_per_block() {
        let mut f = fixture(8);
        f.chain.submit_transaction(&f.state, f.deploy(1)).unwrap();
        f.tick(15_000);
        let out = f.chain.export_jsonl();
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(v["height"], 1);
        assert_eq!(v["tx_kinds"][0], "ContractDeploy");
    }
}
