//! Energy accounts, offers and the settlement contract.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coe::verify_coe;
use crate::crypto::{digest_parts, verify, Address, Hash, PublicKey, Signature};
use crate::ctp::{CtpError, CtpId, CtpRecord, CtpStore};
use crate::ledger::{Ledger, LedgerError};
use crate::sim::SimTime;
use crate::trade::Erc;

pub const DEFAULT_BURN_AMOUNT: u64 = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MarketError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("authority signature does not verify")]
    BadAuthoritySignature,
    #[error("energy account for {0} already exists")]
    AccountExists(Address),
    #[error("no energy account for {0}")]
    NoAccount(Address),
    #[error("amount must be positive")]
    NonPositiveAmount,
    #[error("insufficient energy: need {need}, available {available}")]
    InsufficientEnergy { need: u64, available: u64 },
    #[error("insufficient reserved energy: need {need}, reserved {reserved}")]
    InsufficientReserved { need: u64, reserved: u64 },
    #[error("certificate of existence does not verify")]
    BadCoE,
    #[error("meter signature does not verify")]
    BadMeterSignature,
    #[error("ctp {0} not found")]
    CtpNotFound(CtpId),
    #[error("ctp {0} expired")]
    CtpExpired(CtpId),
    #[error("ctp {0} already settled")]
    AlreadySettled(CtpId),
    #[error("energy mismatch: ctp {expected}, receipt {got}")]
    EnergyMismatch { expected: u64, got: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccountMode {
    Burn(u64),
    AuthorityCert(Signature),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Burn(Hash),
    AuthorityCert(Signature),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyAccount {
    pub owner: Address,
    pub energy_available: u64,
    pub energy_reserved: u64,
    pub price_per_kwh: u64,
    pub negotiable: bool,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offer {
    pub producer: Address,
    pub energy: u64,
    pub price_per_kwh: u64,
    pub negotiable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settlement {
    pub ctp_id: CtpId,
    pub amount: u64,
    pub producer: Address,
    pub settled_at: SimTime,
}

pub fn authority_message(owner: &Address) -> Vec<u8> {
    [b"spb/energy-account".as_slice(), &owner.0].concat()
}

pub fn burn_id(owner: &Address, amount: u64) -> Hash {
    digest_parts(&[b"spb/burn", &owner.0, &amount.to_le_bytes()])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnergyMarket {
    accounts: BTreeMap<Address, EnergyAccount>,
    authority_pk: PublicKey,
}

impl EnergyMarket {
    pub fn new(authority_pk: PublicKey) -> Self {
        Self {
            accounts: BTreeMap::new(),
            authority_pk,
        }
    }

    pub fn create_energy_account(
        &mut self,
        ledger: &mut Ledger,
        owner: Address,
        mode: AccountMode,
    ) -> Result<&EnergyAccount, MarketError> {
        if self.accounts.contains_key(&owner) {
            return Err(MarketError::AccountExists(owner));
        }
        let provenance = match mode {
            AccountMode::Burn(amount) => {
                ledger.burn(&owner, amount)?;
                Provenance::Burn(burn_id(&owner, amount))
            }
            AccountMode::AuthorityCert(sig) => {
                if !verify(&authority_message(&owner), &sig, &self.authority_pk) {
                    return Err(MarketError::BadAuthoritySignature);
                }
                Provenance::AuthorityCert(sig)
            }
        };
        let acct = EnergyAccount {
            owner,
            energy_available: 0,
            energy_reserved: 0,
            price_per_kwh: 0,
            negotiable: false,
            provenance,
        };
        Ok(self.accounts.entry(owner).or_insert(acct))
    }

    pub fn account(&self, owner: &Address) -> Option<&EnergyAccount> {
        self.accounts.get(owner)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &EnergyAccount> {
        self.accounts.values()
    }

    fn account_mut(&mut self, owner: &Address) -> Result<&mut EnergyAccount, MarketError> {
        self.accounts
            .get_mut(owner)
            .ok_or(MarketError::NoAccount(*owner))
    }

    /// Sets the ask price for all of the producer's energy.
    pub fn add_energy(&mut self, producer: &Address, amount: u64, price_per_kwh: u64) -> Result<(), MarketError> {
        if amount == 0 || price_per_kwh == 0 {
            return Err(MarketError::NonPositiveAmount);
        }
        let acct = self.account_mut(producer)?;
        acct.energy_available += amount;
        acct.price_per_kwh = price_per_kwh;
        Ok(())
    }

    pub fn set_negotiable(&mut self, producer: &Address, negotiable: bool) -> Result<(), MarketError> {
        self.account_mut(producer)?.negotiable = negotiable;
        Ok(())
    }

    pub fn unreserved(&self, producer: &Address) -> Option<u64> {
        self.accounts.get(producer).map(|a| a.energy_available)
    }

    pub fn reserve(&mut self, producer: &Address, energy: u64) -> Result<(), MarketError> {
        let acct = self.account_mut(producer)?;
        if acct.energy_available < energy {
            return Err(MarketError::InsufficientEnergy {
                need: energy,
                available: acct.energy_available,
            });
        }
        acct.energy_available -= energy;
        acct.energy_reserved += energy;
        Ok(())
    }

    pub fn release_reservation(&mut self, producer: &Address, energy: u64) -> Result<(), MarketError> {
        let acct = self.account_mut(producer)?;
        if acct.energy_reserved < energy {
            return Err(MarketError::InsufficientReserved {
                need: energy,
                reserved: acct.energy_reserved,
            });
        }
        acct.energy_reserved -= energy;
        acct.energy_available += energy;
        Ok(())
    }

    /// The reserved energy has been sold.
    pub fn consume_reserved(&mut self, producer: &Address, energy: u64) -> Result<(), MarketError> {
        let acct = self.account_mut(producer)?;
        if acct.energy_reserved < energy {
            return Err(MarketError::InsufficientReserved {
                need: energy,
                reserved: acct.energy_reserved,
            });
        }
        acct.energy_reserved -= energy;
        Ok(())
    }

    /// Offers sorted by price, then producer address.
    pub fn query_offers(&self, min_energy: u64, max_price: u64) -> Vec<Offer> {
        let mut out: Vec<Offer> = self
            .accounts
            .values()
            .filter(|a| a.energy_available > 0 && a.price_per_kwh > 0)
            .filter(|a| a.energy_available >= min_energy && a.price_per_kwh <= max_price)
            .map(|a| Offer {
                producer: a.owner,
                energy: a.energy_available,
                price_per_kwh: a.price_per_kwh,
                negotiable: a.negotiable,
            })
            .collect();
        out.sort_by_key(|o| (o.price_per_kwh, o.producer));
        out
    }
}

/// The shared market contract run by the miner.
#[derive(Debug, Clone)]
pub struct EnergyContract {
    manufacturer_pk: PublicKey,
    settlements: BTreeMap<CtpId, Settlement>,
}

impl EnergyContract {
    pub fn new(manufacturer_pk: PublicKey) -> Self {
        Self {
            manufacturer_pk,
            settlements: BTreeMap::new(),
        }
    }

    pub fn settlements(&self) -> impl Iterator<Item = &Settlement> {
        self.settlements.values()
    }

    pub fn settlement(&self, id: &CtpId) -> Option<&Settlement> {
        self.settlements.get(id)
    }

    /// Verify a receipt and mark its CTP settled. The caller queues the
    /// settlement transaction; funds move when it is mined.
    pub fn settle_erc(
        &mut self,
        store: &mut CtpStore,
        erc: &Erc,
        now: SimTime,
    ) -> Result<(Settlement, CtpRecord), MarketError> {
        if !verify_coe(&erc.coe, &erc.leaf_pk, &erc.proof, &self.manufacturer_pk) {
            return Err(MarketError::BadCoE);
        }
        if !erc.verify_signature() {
            return Err(MarketError::BadMeterSignature);
        }
        let rec = store.settleable(&erc.ctp_id, now).map_err(map_ctp_error)?;
        if rec.ctp.energy != erc.energy_amount {
            return Err(MarketError::EnergyMismatch {
                expected: rec.ctp.energy,
                got: erc.energy_amount,
            });
        }
        if self.settlements.contains_key(&erc.ctp_id) {
            return Err(MarketError::AlreadySettled(erc.ctp_id));
        }
        let rec = store
            .take_for_settlement(&erc.ctp_id, now)
            .map_err(map_ctp_error)?;
        let s = Settlement {
            ctp_id: rec.id,
            amount: rec.ctp.amount,
            producer: rec.ctp.producer,
            settled_at: now,
        };
        self.settlements.insert(rec.id, s.clone());
        Ok((s, rec))
    }
}

fn map_ctp_error(e: CtpError) -> MarketError {
    match e {
        CtpError::NotFound(id) => MarketError::CtpNotFound(id),
        CtpError::Expired(id) => MarketError::CtpExpired(id),
        CtpError::AlreadySettled(id) => MarketError::AlreadySettled(id),
        other => unreachable!("settlement lookup cannot fail with {other}"),
    }
}
