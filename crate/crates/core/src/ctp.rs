//! The miner's off-chain commit-to-pay database.
//!
//! Record serialization, the input to [`CtpStore::db_hash`]:
//!
//! ```text
//! ctp     = bytes(consumer) bytes(producer) bytes(amount) bytes(energy)
//!           bytes(expiry_time) bytes(nonce) bytes(consumer_sig)
//! record  = id[32] status[1] bytes(ctp)
//! db      = count[u64] record*            (records ascending by id)
//! bytes(x) = len[u32 LE] x                integers are u64 LE
//! status  = 0 Pending | 1 Settled | 2 Expired
//! ```
//!
//! The signature covers `ctp` without its final field. The id is the digest
//! of the full `ctp` encoding.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::{digest, verify, Address, Hash, KeyPair, Signature};
use crate::ledger::Ledger;
use crate::market::{EnergyMarket, MarketError};
use crate::sim::SimTime;

pub type CtpId = Hash;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CtpError {
    #[error("invalid ctp: {0}")]
    Invalid(&'static str),
    #[error("unknown consumer {0}")]
    UnknownConsumer(Address),
    #[error("consumer signature does not verify")]
    BadSignature,
    #[error("insufficient funds: need {need}, available {available}")]
    InsufficientFunds { need: u64, available: u64 },
    #[error("insufficient energy: need {need}, available {available}")]
    InsufficientEnergy { need: u64, available: u64 },
    #[error("producer {0} has no energy account")]
    NoEnergyAccount(Address),
    #[error("duplicate ctp {0}")]
    DuplicateCtp(CtpId),
    #[error("ctp {0} not found")]
    NotFound(CtpId),
    #[error("ctp {0} already settled")]
    AlreadySettled(CtpId),
    #[error("ctp {0} expired")]
    Expired(CtpId),
    #[error("ctp {id} does not expire until {expiry_time}")]
    NotYetExpired { id: CtpId, expiry_time: SimTime },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ctp {
    pub consumer: Address,
    pub producer: Address,
    pub amount: u64,
    pub energy: u64,
    pub expiry_time: SimTime,
    pub nonce: [u8; 8],
    pub consumer_sig: Signature,
}

impl Ctp {
    pub fn signed(
        consumer: &KeyPair,
        producer: Address,
        amount: u64,
        energy: u64,
        expiry_time: SimTime,
        nonce: [u8; 8],
    ) -> Self {
        let mut ctp = Self {
            consumer: consumer.address(),
            producer,
            amount,
            energy,
            expiry_time,
            nonce,
            consumer_sig: Signature([0; 64]),
        };
        ctp.consumer_sig = consumer.sign(&ctp.signing_bytes());
        ctp
    }

    fn write_unsigned(&self, w: &mut Writer) {
        w.bytes(&self.consumer.0)
            .bytes(&self.producer.0)
            .bytes(&self.amount.to_le_bytes())
            .bytes(&self.energy.to_le_bytes())
            .bytes(&self.expiry_time.to_le_bytes())
            .bytes(&self.nonce);
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_unsigned(&mut w);
        w.finish()
    }

    pub fn encode(&self, w: &mut Writer) {
        self.write_unsigned(w);
        w.bytes(&self.consumer_sig.0);
    }

    pub fn canonical(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.finish()
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            consumer: Address(sized(r)?),
            producer: Address(sized(r)?),
            amount: u64::from_le_bytes(sized(r)?),
            energy: u64::from_le_bytes(sized(r)?),
            expiry_time: u64::from_le_bytes(sized(r)?),
            nonce: sized(r)?,
            consumer_sig: Signature(sized(r)?),
        })
    }

    pub fn id(&self) -> CtpId {
        digest(&self.canonical())
    }

    pub fn verify_signature(&self, ledger: &Ledger) -> bool {
        ledger
            .public_key(&self.consumer)
            .is_some_and(|pk| verify(&self.signing_bytes(), &self.consumer_sig, &pk))
    }
}

fn sized<const N: usize>(r: &mut Reader<'_>) -> Result<[u8; N], DecodeError> {
    let at = r.position();
    let b = r.bytes()?;
    b.try_into().map_err(|_| DecodeError::BadTag {
        tag: b.len().min(255) as u8,
        offset: at,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CtpStatus {
    Pending,
    Settled,
    Expired,
}

impl CtpStatus {
    fn tag(self) -> u8 {
        match self {
            CtpStatus::Pending => 0,
            CtpStatus::Settled => 1,
            CtpStatus::Expired => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtpRecord {
    pub id: CtpId,
    pub ctp: Ctp,
    pub status: CtpStatus,
}

/// A state change of the database, replayed by chain validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CtpOp {
    Insert { ctp: Ctp, now: SimTime },
    Settle { id: CtpId, now: SimTime },
    Expire { id: CtpId, now: SimTime },
}

/// `epoch` is the height of the block that follows the op.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalEntry {
    pub epoch: u64,
    pub op: CtpOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeoutOutcome {
    Refunded,
    AlreadyRefunded,
}

#[derive(Debug, Clone, Default)]
pub struct CtpStore {
    records: BTreeMap<CtpId, CtpRecord>,
    journal: Vec<JournalEntry>,
    epoch: u64,
    fee_reserve: u64,
    // Settled records whose settlement transaction is not yet mined.
    awaiting_capture: BTreeSet<CtpId>,
}

impl CtpStore {
    /// `fee_reserve` is kept free per pending CTP so the settlement fee can
    /// always be paid. Zero disables the reserve.
    pub fn new(fee_reserve: u64) -> Self {
        Self {
            fee_reserve,
            ..Self::default()
        }
    }

    pub fn set_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    pub fn get(&self, id: &CtpId) -> Option<&CtpRecord> {
        self.records.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &CtpRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Pending plus settled-but-unmined CTPs of `consumer`.
    pub fn outstanding_of(&self, consumer: &Address) -> usize {
        self.records
            .values()
            .filter(|r| r.ctp.consumer == *consumer)
            .filter(|r| r.status == CtpStatus::Pending || self.awaiting_capture.contains(&r.id))
            .count()
    }

    pub fn mark_captured(&mut self, id: &CtpId) -> bool {
        self.awaiting_capture.remove(id)
    }

    pub fn awaiting_capture(&self) -> impl Iterator<Item = &CtpRecord> {
        self.awaiting_capture.iter().filter_map(|id| self.records.get(id))
    }

    /// Sum held on behalf of this store: pending plus awaiting capture.
    pub fn held_amount(&self) -> u128 {
        self.pending_amount()
            + self
                .awaiting_capture()
                .map(|r| r.ctp.amount as u128)
                .sum::<u128>()
    }

    pub fn pending_amount(&self) -> u128 {
        self.records
            .values()
            .filter(|r| r.status == CtpStatus::Pending)
            .map(|r| r.ctp.amount as u128)
            .sum()
    }

    pub fn insert_ctp(
        &mut self,
        ctp: Ctp,
        now: SimTime,
        ledger: &mut Ledger,
        market: &mut EnergyMarket,
    ) -> Result<CtpId, CtpError> {
        if ctp.amount == 0 {
            return Err(CtpError::Invalid("amount must be positive"));
        }
        if ctp.energy == 0 {
            return Err(CtpError::Invalid("energy must be positive"));
        }
        if ctp.expiry_time <= now {
            return Err(CtpError::Invalid("expiry must lie in the future"));
        }
        let id = ctp.id();
        if self.records.contains_key(&id) {
            return Err(CtpError::DuplicateCtp(id));
        }
        if ledger.public_key(&ctp.consumer).is_none() {
            return Err(CtpError::UnknownConsumer(ctp.consumer));
        }
        if !ctp.verify_signature(ledger) {
            return Err(CtpError::BadSignature);
        }
        let reserve = self.fee_reserve * (self.outstanding_of(&ctp.consumer) as u64 + 1);
        let need = ctp.amount + reserve;
        let available = ledger.available(&ctp.consumer);
        if available < need {
            return Err(CtpError::InsufficientFunds { need, available });
        }
        let unreserved = market
            .unreserved(&ctp.producer)
            .ok_or(CtpError::NoEnergyAccount(ctp.producer))?;
        if unreserved < ctp.energy {
            return Err(CtpError::InsufficientEnergy {
                need: ctp.energy,
                available: unreserved,
            });
        }
        ledger
            .hold_funds(&ctp.consumer, ctp.amount)
            .expect("balance checked above");
        market
            .reserve(&ctp.producer, ctp.energy)
            .expect("energy checked above");
        self.journal.push(JournalEntry {
            epoch: self.epoch,
            op: CtpOp::Insert {
                ctp: ctp.clone(),
                now,
            },
        });
        self.records.insert(
            id,
            CtpRecord {
                id,
                ctp,
                status: CtpStatus::Pending,
            },
        );
        Ok(id)
    }

    fn check_settleable(&self, id: &CtpId, now: SimTime) -> Result<&CtpRecord, CtpError> {
        let rec = self.records.get(id).ok_or(CtpError::NotFound(*id))?;
        match rec.status {
            CtpStatus::Settled => Err(CtpError::AlreadySettled(*id)),
            CtpStatus::Expired => Err(CtpError::Expired(*id)),
            CtpStatus::Pending if now >= rec.ctp.expiry_time => Err(CtpError::Expired(*id)),
            CtpStatus::Pending => Ok(rec),
        }
    }

    /// Peek at a record as settlement would see it, without changing it.
    pub fn settleable(&self, id: &CtpId, now: SimTime) -> Result<&CtpRecord, CtpError> {
        self.check_settleable(id, now)
    }

    /// Mark settled. Funds stay held until the settlement transaction is mined.
    pub fn take_for_settlement(&mut self, id: &CtpId, now: SimTime) -> Result<CtpRecord, CtpError> {
        self.check_settleable(id, now)?;
        let rec = self.records.get_mut(id).expect("checked above");
        rec.status = CtpStatus::Settled;
        self.awaiting_capture.insert(*id);
        self.journal.push(JournalEntry {
            epoch: self.epoch,
            op: CtpOp::Settle { id: *id, now },
        });
        Ok(rec.clone())
    }

    fn expire(
        &mut self,
        id: &CtpId,
        now: SimTime,
        ledger: &mut Ledger,
        market: &mut EnergyMarket,
    ) -> Result<(), CtpError> {
        let rec = self.records.get_mut(id).ok_or(CtpError::NotFound(*id))?;
        let ctp = &rec.ctp;
        ledger
            .release_hold(&ctp.consumer, ctp.amount)
            .expect("pending ctp has its hold");
        market
            .release_reservation(&ctp.producer, ctp.energy)
            .expect("pending ctp has its reservation");
        rec.status = CtpStatus::Expired;
        self.journal.push(JournalEntry {
            epoch: self.epoch,
            op: CtpOp::Expire { id: *id, now },
        });
        Ok(())
    }

    pub fn sweep_expired(
        &mut self,
        now: SimTime,
        ledger: &mut Ledger,
        market: &mut EnergyMarket,
    ) -> Vec<CtpId> {
        let due: Vec<CtpId> = self
            .records
            .values()
            .filter(|r| r.status == CtpStatus::Pending && r.ctp.expiry_time <= now)
            .map(|r| r.id)
            .collect();
        for id in &due {
            self.expire(id, now, ledger, market).expect("id taken from the store");
        }
        due
    }

    /// A consumer's explicit refund request. Honored only past expiry.
    pub fn timeout_request(
        &mut self,
        id: &CtpId,
        now: SimTime,
        ledger: &mut Ledger,
        market: &mut EnergyMarket,
    ) -> Result<TimeoutOutcome, CtpError> {
        let rec = self.records.get(id).ok_or(CtpError::NotFound(*id))?;
        match rec.status {
            CtpStatus::Settled => Err(CtpError::AlreadySettled(*id)),
            CtpStatus::Expired => Ok(TimeoutOutcome::AlreadyRefunded),
            CtpStatus::Pending if now < rec.ctp.expiry_time => Err(CtpError::NotYetExpired {
                id: *id,
                expiry_time: rec.ctp.expiry_time,
            }),
            CtpStatus::Pending => {
                self.expire(id, now, ledger, market)?;
                Ok(TimeoutOutcome::Refunded)
            }
        }
    }

    /// Re-execute a journal op against replica state.
    pub fn apply_op(
        &mut self,
        op: &CtpOp,
        ledger: &mut Ledger,
        market: &mut EnergyMarket,
    ) -> Result<(), CtpError> {
        match op {
            CtpOp::Insert { ctp, now } => self.insert_ctp(ctp.clone(), *now, ledger, market).map(|_| ()),
            CtpOp::Settle { id, now } => self.take_for_settlement(id, *now).map(|_| ()),
            CtpOp::Expire { id, now } => {
                let rec = self.records.get(id).ok_or(CtpError::NotFound(*id))?;
                if rec.status != CtpStatus::Pending {
                    return Err(CtpError::AlreadySettled(*id));
                }
                if *now < rec.ctp.expiry_time {
                    return Err(CtpError::NotYetExpired {
                        id: *id,
                        expiry_time: rec.ctp.expiry_time,
                    });
                }
                self.expire(id, *now, ledger, market)
            }
        }
    }

    pub fn canonical(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.records.len() as u64);
        for rec in self.records.values() {
            w.fixed(&rec.id.0).u8(rec.status.tag());
            let mut inner = Writer::new();
            rec.ctp.encode(&mut inner);
            w.bytes(&inner.finish());
        }
        w.finish()
    }

    pub fn db_hash(&self) -> Hash {
        digest(&self.canonical())
    }
}

impl From<MarketError> for CtpError {
    fn from(e: MarketError) -> Self {
        match e {
            MarketError::NoAccount(a) => CtpError::NoEnergyAccount(a),
            MarketError::InsufficientEnergy { need, available } => {
                CtpError::InsufficientEnergy { need, available }
            }
            _ => CtpError::Invalid("market rejected the reservation"),
        }
    }
}
