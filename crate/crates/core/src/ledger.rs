//! Account balances with hold semantics.
//!
//! Every movement of currency is a transfer between two accounts, so the sum
//! of `available + held` over the ledger never changes after genesis. Burned
//! coins sit in [`Address::BURN`], fees in the miner's account.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{derive_address, Address, PublicKey};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("unknown account {0}")]
    UnknownAccount(Address),
    #[error("account {0} already exists")]
    AccountExists(Address),
    #[error("insufficient funds in {account}: need {need}, available {available}")]
    InsufficientFunds { account: Address, need: u64, available: u64 },
    #[error("insufficient hold in {account}: need {need}, held {held}")]
    InsufficientHold { account: Address, need: u64, held: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountState {
    pub available: u64,
    pub held: u64,
}

impl AccountState {
    pub fn total(&self) -> u64 {
        self.available + self.held
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    accounts: BTreeMap<Address, AccountState>,
    keys: BTreeMap<Address, PublicKey>,
}

impl Ledger {
    pub fn new() -> Self {
        let mut l = Self::default();
        l.accounts.insert(Address::BURN, AccountState::default());
        l
    }

    /// Open a key-backed account with an initial balance. Genesis only.
    pub fn open_keyed(&mut self, pk: PublicKey, balance: u64) -> Result<Address, LedgerError> {
        let addr = derive_address(&pk);
        self.open(addr, balance)?;
        self.keys.insert(addr, pk);
        Ok(addr)
    }

    /// Open an account with no key, e.g. a contract or the miner.
    pub fn open(&mut self, addr: Address, balance: u64) -> Result<(), LedgerError> {
        if self.accounts.contains_key(&addr) {
            return Err(LedgerError::AccountExists(addr));
        }
        self.accounts.insert(
            addr,
            AccountState {
                available: balance,
                held: 0,
            },
        );
        Ok(())
    }

    pub fn contains(&self, addr: &Address) -> bool {
        self.accounts.contains_key(addr)
    }

    pub fn get(&self, addr: &Address) -> Option<AccountState> {
        self.accounts.get(addr).copied()
    }

    pub fn public_key(&self, addr: &Address) -> Option<PublicKey> {
        self.keys.get(addr).copied()
    }

    pub fn available(&self, addr: &Address) -> u64 {
        self.get(addr).map_or(0, |a| a.available)
    }

    pub fn held(&self, addr: &Address) -> u64 {
        self.get(addr).map_or(0, |a| a.held)
    }

    pub fn accounts(&self) -> impl Iterator<Item = (&Address, &AccountState)> {
        self.accounts.iter()
    }

    pub fn total_supply(&self) -> u128 {
        self.accounts.values().map(|a| a.total() as u128).sum()
    }

    pub fn total_held(&self) -> u128 {
        self.accounts.values().map(|a| a.held as u128).sum()
    }

    fn account_mut(&mut self, addr: &Address) -> Result<&mut AccountState, LedgerError> {
        self.accounts
            .get_mut(addr)
            .ok_or(LedgerError::UnknownAccount(*addr))
    }

    pub fn check_available(&self, addr: &Address, need: u64) -> Result<(), LedgerError> {
        let a = self.get(addr).ok_or(LedgerError::UnknownAccount(*addr))?;
        if a.available < need {
            return Err(LedgerError::InsufficientFunds {
                account: *addr,
                need,
                available: a.available,
            });
        }
        Ok(())
    }

    pub fn check_held(&self, addr: &Address, need: u64) -> Result<(), LedgerError> {
        let a = self.get(addr).ok_or(LedgerError::UnknownAccount(*addr))?;
        if a.held < need {
            return Err(LedgerError::InsufficientHold {
                account: *addr,
                need,
                held: a.held,
            });
        }
        Ok(())
    }

    pub fn hold_funds(&mut self, addr: &Address, amount: u64) -> Result<(), LedgerError> {
        self.check_available(addr, amount)?;
        let a = self.account_mut(addr)?;
        a.available -= amount;
        a.held += amount;
        Ok(())
    }

    pub fn release_hold(&mut self, addr: &Address, amount: u64) -> Result<(), LedgerError> {
        self.check_held(addr, amount)?;
        let a = self.account_mut(addr)?;
        a.held -= amount;
        a.available += amount;
        Ok(())
    }

    pub fn capture_hold(&mut self, from: &Address, to: &Address, amount: u64) -> Result<(), LedgerError> {
        self.check_held(from, amount)?;
        if !self.contains(to) {
            return Err(LedgerError::UnknownAccount(*to));
        }
        self.account_mut(from)?.held -= amount;
        self.account_mut(to)?.available += amount;
        Ok(())
    }

    pub fn transfer(&mut self, from: &Address, to: &Address, amount: u64) -> Result<(), LedgerError> {
        self.check_available(from, amount)?;
        if !self.contains(to) {
            return Err(LedgerError::UnknownAccount(*to));
        }
        self.account_mut(from)?.available -= amount;
        self.account_mut(to)?.available += amount;
        Ok(())
    }

    pub fn burn(&mut self, from: &Address, amount: u64) -> Result<(), LedgerError> {
        self.transfer(from, &Address::BURN, amount)
    }
}
