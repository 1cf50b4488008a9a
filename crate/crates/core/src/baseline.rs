//! Escrow-contract trading: every trade deploys a contract, pays into it,
//! and confirms receipt, which releases the escrow to the producer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Address, Hash};
use crate::ledger::{Ledger, LedgerError};
use crate::market::{EnergyMarket, MarketError};
use crate::sim::SimTime;
use crate::tx::{contract_address, Transaction, TxBody};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EscrowError {
    #[error("unknown contract {0}")]
    UnknownContract(Address),
    #[error("contract {0} already deployed")]
    ContractExists(Address),
    #[error("sender {0} is not the contract's consumer")]
    WrongSender(Address),
    #[error("contract in phase {got:?}, expected {expected:?}")]
    WrongPhase { expected: EscrowPhase, got: EscrowPhase },
    #[error("pay-in of {got} does not match contract amount {expected}")]
    AmountMismatch { expected: u64, got: u64 },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Market(#[from] MarketError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EscrowPhase {
    Deployed,
    Paid,
    Confirmed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Escrow {
    pub deploy_tx: Hash,
    pub consumer: Address,
    pub producer: Address,
    pub amount: u64,
    pub energy: u64,
    pub phase: EscrowPhase,
}

/// On-chain state of all escrow contracts. Each contract's balance is a
/// ledger account at its contract address.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EscrowBook {
    contracts: BTreeMap<Address, Escrow>,
}

impl EscrowBook {
    pub fn get(&self, contract: &Address) -> Option<&Escrow> {
        self.contracts.get(contract)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Address, &Escrow)> {
        self.contracts.iter()
    }

    pub fn len(&self) -> usize {
        self.contracts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contracts.is_empty()
    }

    fn at_phase(&mut self, contract: &Address, sender: &Address, phase: EscrowPhase) -> Result<&mut Escrow, EscrowError> {
        let e = self
            .contracts
            .get_mut(contract)
            .ok_or(EscrowError::UnknownContract(*contract))?;
        if e.consumer != *sender {
            return Err(EscrowError::WrongSender(*sender));
        }
        if e.phase != phase {
            return Err(EscrowError::WrongPhase {
                expected: phase,
                got: e.phase,
            });
        }
        Ok(e)
    }

    /// The deploy reserves the producer's energy for the trade.
    #[allow(clippy::too_many_arguments)]
    pub fn deploy(
        &mut self,
        ledger: &mut Ledger,
        market: &mut EnergyMarket,
        deploy_tx: Hash,
        consumer: Address,
        producer: Address,
        amount: u64,
        energy: u64,
    ) -> Result<Address, EscrowError> {
        let addr = contract_address(&deploy_tx);
        if self.contracts.contains_key(&addr) {
            return Err(EscrowError::ContractExists(addr));
        }
        if !ledger.contains(&producer) {
            return Err(LedgerError::UnknownAccount(producer).into());
        }
        market.reserve(&producer, energy)?;
        ledger.open(addr, 0)?;
        self.contracts.insert(
            addr,
            Escrow {
                deploy_tx,
                consumer,
                producer,
                amount,
                energy,
                phase: EscrowPhase::Deployed,
            },
        );
        Ok(addr)
    }

    pub fn pay_in(&mut self, ledger: &mut Ledger, contract: &Address, sender: &Address, amount: u64) -> Result<(), EscrowError> {
        let e = self.at_phase(contract, sender, EscrowPhase::Deployed)?;
        if e.amount != amount {
            return Err(EscrowError::AmountMismatch {
                expected: e.amount,
                got: amount,
            });
        }
        ledger.transfer(sender, contract, amount)?;
        e.phase = EscrowPhase::Paid;
        Ok(())
    }

    /// Confirmation of receipt pays the producer from the escrow.
    pub fn confirm(
        &mut self,
        ledger: &mut Ledger,
        market: &mut EnergyMarket,
        contract: &Address,
        sender: &Address,
    ) -> Result<(), EscrowError> {
        let e = self.at_phase(contract, sender, EscrowPhase::Paid)?;
        ledger.transfer(contract, &e.producer, e.amount)?;
        market.consume_reserved(&e.producer, e.energy)?;
        e.phase = EscrowPhase::Confirmed;
        Ok(())
    }
}

/// Client-side progress of one baseline trade.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineTrade {
    pub consumer: Address,
    pub producer: Address,
    pub amount: u64,
    pub energy: u64,
    pub contract_tx: Hash,
    pub contract: Address,
    pub pay_in_tx: Option<Hash>,
    pub confirm_payout_tx: Option<Hash>,
    pub phase: EscrowPhase,
    pub started_at: SimTime,
}

/// Padding lengths of baseline transactions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineSizes {
    pub deploy_code: usize,
    pub pay_in_call: usize,
    pub confirm_call: usize,
}

impl BaselineTrade {
    /// Build the deploy transaction and the trade that tracks it.
    #[allow(clippy::too_many_arguments)]
    pub fn start(
        consumer: Address,
        producer: Address,
        amount: u64,
        energy: u64,
        fee: u64,
        nonce: u64,
        sizes: &BaselineSizes,
        now: SimTime,
    ) -> (Self, Transaction) {
        let tx = Transaction::new(
            consumer,
            fee,
            nonce,
            TxBody::BaselineDeploy {
                producer,
                amount,
                energy,
                code: vec![0xC0; sizes.deploy_code],
            },
        );
        let trade = Self {
            consumer,
            producer,
            amount,
            energy,
            contract_tx: tx.id,
            contract: tx.contract_address(),
            pay_in_tx: None,
            confirm_payout_tx: None,
            phase: EscrowPhase::Deployed,
            started_at: now,
        };
        (trade, tx)
    }

    /// Called once the deploy is mined.
    pub fn pay_in(&mut self, fee: u64, nonce: u64, sizes: &BaselineSizes) -> Transaction {
        let tx = Transaction::new(
            self.consumer,
            fee,
            nonce,
            TxBody::BaselinePayIn {
                contract: self.contract,
                amount: self.amount,
                call_data: vec![0xCA; sizes.pay_in_call],
            },
        );
        self.pay_in_tx = Some(tx.id);
        tx
    }

    /// Called once the pay-in is mined and the energy has arrived.
    pub fn confirm(&mut self, fee: u64, nonce: u64, sizes: &BaselineSizes) -> Transaction {
        let tx = Transaction::new(
            self.consumer,
            fee,
            nonce,
            TxBody::BaselineConfirmPayout {
                contract: self.contract,
                call_data: vec![0xCB; sizes.confirm_call],
            },
        );
        self.confirm_payout_tx = Some(tx.id);
        tx
    }

    pub fn advance(&mut self, mined: EscrowPhase) {
        debug_assert!(mined >= self.phase);
        self.phase = mined;
    }
}
