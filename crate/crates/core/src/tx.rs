//! On-chain transactions.
//!
//! ```text
//! tx   = kind[1] sender[20] fee[u64] nonce[u64] bytes(body)
//! id   = digest(tx)
//! ```
//!
//! `code` and `call_data` are opaque padding whose length stands in for
//! contract bytecode and ABI-encoded arguments.

use serde::{Deserialize, Serialize};

use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::{digest, digest_parts, Address, Hash};
use crate::ctp::Ctp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TxKind {
    ContractDeploy,
    EnergyAdd,
    SettledCtp,
    BaselineDeploy,
    BaselinePayIn,
    BaselineConfirmPayout,
}

impl TxKind {
    pub const ALL: [TxKind; 6] = [
        TxKind::ContractDeploy,
        TxKind::EnergyAdd,
        TxKind::SettledCtp,
        TxKind::BaselineDeploy,
        TxKind::BaselinePayIn,
        TxKind::BaselineConfirmPayout,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxBody {
    ContractDeploy {
        code: Vec<u8>,
    },
    EnergyAdd {
        energy: u64,
        price_per_kwh: u64,
        call_data: Vec<u8>,
    },
    SettledCtp {
        ctp: Ctp,
        call_data: Vec<u8>,
    },
    BaselineDeploy {
        producer: Address,
        amount: u64,
        energy: u64,
        code: Vec<u8>,
    },
    BaselinePayIn {
        contract: Address,
        amount: u64,
        call_data: Vec<u8>,
    },
    BaselineConfirmPayout {
        contract: Address,
        call_data: Vec<u8>,
    },
}

impl TxBody {
    pub fn kind(&self) -> TxKind {
        match self {
            TxBody::ContractDeploy { .. } => TxKind::ContractDeploy,
            TxBody::EnergyAdd { .. } => TxKind::EnergyAdd,
            TxBody::SettledCtp { .. } => TxKind::SettledCtp,
            TxBody::BaselineDeploy { .. } => TxKind::BaselineDeploy,
            TxBody::BaselinePayIn { .. } => TxKind::BaselinePayIn,
            TxBody::BaselineConfirmPayout { .. } => TxKind::BaselineConfirmPayout,
        }
    }

    fn encode(&self, w: &mut Writer) {
        match self {
            TxBody::ContractDeploy { code } => {
                w.bytes(code);
            }
            TxBody::EnergyAdd {
                energy,
                price_per_kwh,
                call_data,
            } => {
                w.u64(*energy).u64(*price_per_kwh).bytes(call_data);
            }
            TxBody::SettledCtp { ctp, call_data } => {
                w.bytes(&ctp.canonical()).bytes(call_data);
            }
            TxBody::BaselineDeploy {
                producer,
                amount,
                energy,
                code,
            } => {
                w.fixed(&producer.0).u64(*amount).u64(*energy).bytes(code);
            }
            TxBody::BaselinePayIn {
                contract,
                amount,
                call_data,
            } => {
                w.fixed(&contract.0).u64(*amount).bytes(call_data);
            }
            TxBody::BaselineConfirmPayout { contract, call_data } => {
                w.fixed(&contract.0).bytes(call_data);
            }
        }
    }

    fn decode(kind: TxKind, bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let body = match kind {
            TxKind::ContractDeploy => TxBody::ContractDeploy {
                code: r.bytes()?.to_vec(),
            },
            TxKind::EnergyAdd => TxBody::EnergyAdd {
                energy: r.u64()?,
                price_per_kwh: r.u64()?,
                call_data: r.bytes()?.to_vec(),
            },
            TxKind::SettledCtp => {
                let mut inner = Reader::new(r.bytes()?);
                let ctp = Ctp::decode(&mut inner)?;
                inner.finish()?;
                TxBody::SettledCtp {
                    ctp,
                    call_data: r.bytes()?.to_vec(),
                }
            }
            TxKind::BaselineDeploy => TxBody::BaselineDeploy {
                producer: Address(r.fixed()?),
                amount: r.u64()?,
                energy: r.u64()?,
                code: r.bytes()?.to_vec(),
            },
            TxKind::BaselinePayIn => TxBody::BaselinePayIn {
                contract: Address(r.fixed()?),
                amount: r.u64()?,
                call_data: r.bytes()?.to_vec(),
            },
            TxKind::BaselineConfirmPayout => TxBody::BaselineConfirmPayout {
                contract: Address(r.fixed()?),
                call_data: r.bytes()?.to_vec(),
            },
        };
        r.finish()?;
        Ok(body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub sender: Address,
    pub fee: u64,
    pub nonce: u64,
    pub body: TxBody,
    /// Cached at construction; [`Transaction::is_consistent`] rechecks it.
    pub id: Hash,
    pub byte_size: usize,
}

impl Transaction {
    pub fn new(sender: Address, fee: u64, nonce: u64, body: TxBody) -> Self {
        let mut tx = Self {
            sender,
            fee,
            nonce,
            body,
            id: Hash::ZERO,
            byte_size: 0,
        };
        let bytes = tx.canonical();
        tx.id = digest(&bytes);
        tx.byte_size = bytes.len();
        tx
    }

    pub fn kind(&self) -> TxKind {
        self.body.kind()
    }

    pub fn canonical(&self) -> Vec<u8> {
        let mut body = Writer::new();
        self.body.encode(&mut body);
        let mut w = Writer::new();
        w.u8(self.kind().tag())
            .fixed(&self.sender.0)
            .u64(self.fee)
            .u64(self.nonce)
            .bytes(&body.finish());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        let kind = TxKind::from_tag(tag).ok_or(DecodeError::BadTag { tag, offset: 0 })?;
        let sender = Address(r.fixed()?);
        let fee = r.u64()?;
        let nonce = r.u64()?;
        let body = TxBody::decode(kind, r.bytes()?)?;
        r.finish()?;
        Ok(Self::new(sender, fee, nonce, body))
    }

    /// The cached id and size match the content.
    pub fn is_consistent(&self) -> bool {
        let bytes = self.canonical();
        self.id == digest(&bytes) && self.byte_size == bytes.len()
    }

    /// Address of the escrow contract created by a baseline deploy.
    pub fn contract_address(&self) -> Address {
        contract_address(&self.id)
    }
}

pub fn contract_address(deploy_id: &Hash) -> Address {
    let d = digest_parts(&[b"spb/contract", &deploy_id.0]);
    Address::from_slice(&d.0[..Address::LEN]).expect("20-byte prefix")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keypair_from_label;
    use proptest::prelude::*;

    fn samples() -> Vec<TxBody> {
        let kp = keypair_from_label(b"c");
        let ctp = Ctp::signed(&kp, Address([3; 20]), 40, 50, 60_000, [1; 8]);
        vec![
            TxBody::ContractDeploy { code: vec![1; 100] },
            TxBody::EnergyAdd { energy: 50, price_per_kwh: 2, call_data: vec![2; 10] },
            TxBody::SettledCtp { ctp, call_data: vec![] },
            TxBody::BaselineDeploy { producer: Address([4; 20]), amount: 40, energy: 50, code: vec![5; 7] },
            TxBody::BaselinePayIn { contract: Address([6; 20]), amount: 40, call_data: vec![] },
            TxBody::BaselineConfirmPayout { contract: Address([6; 20]), call_data: vec![9] },
        ]
    }

    #[test]
    fn every_kind_roundtrips() {
        for (i, body) in samples().into_iter().enumerate() {
            let tx = Transaction::new(Address([1; 20]), 20, i as u64, body);
            let bytes = tx.canonical();
            assert_eq!(tx.byte_size, bytes.len());
            assert_eq!(Transaction::decode(&bytes).unwrap(), tx);
            assert!(tx.is_consistent());
        }
    }

    #[test]
    fn kind_tags_are_dense() {
        for (i, k) in TxKind::ALL.iter().enumerate() {
            assert_eq!(k.tag() as usize, i);
            assert_eq!(TxKind::from_tag(i as u8), Some(*k));
        }
        assert_eq!(TxKind::from_tag(6), None);
    }

    #[test]
    fn size_grows_with_padding() {
        let a = Transaction::new(Address::BURN, 20, 0, TxBody::ContractDeploy { code: vec![0; 10] });
        let b = Transaction::new(Address::BURN, 20, 0, TxBody::ContractDeploy { code: vec![0; 110] });
        assert_eq!(b.byte_size - a.byte_size, 100);
        // tag + sender + fee + nonce + body prefix + code prefix
        assert_eq!(a.byte_size, 1 + 20 + 8 + 8 + 4 + 4 + 10);
    }

    #[test]
    fn edits_break_consistency() {
        let mut tx = Transaction::new(Address::BURN, 20, 0, samples().remove(1));
        tx.nonce += 1;
        assert!(!tx.is_consistent());
    }

    proptest! {
        #[test]
        fn byte_flips_change_id_or_fail_decode(which in 0usize..6, pos in any::<usize>(), bit in 0u8..8) {
            let tx = Transaction::new(Address([1; 20]), 20, 3, samples().remove(which));
            let mut bytes = tx.canonical();
            let p = pos % bytes.len();
            bytes[p] ^= 1 << bit;
            if let Ok(decoded) = Transaction::decode(&bytes) {
                prop_assert_ne!(decoded.id, tx.id);
            }
        }
    }
}
