//! Receipts, trade constructors and the per-trade state machines of the
//! consumer, producer and smart meter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coe::{issue_certificate, CoECertificate, CoeError, MeterIdentity};
use crate::crypto::{digest_parts, generate_keypair, verify, Address, KeyPair, PublicKey, Signature};
use crate::ctp::{Ctp, CtpId};
use crate::merkle::MerkleTree;
use crate::sim::SimTime;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TradeError {
    #[error("ttl must be positive")]
    ZeroTtl,
    #[error("amount and energy must be positive")]
    NonPositive,
    #[error(transparent)]
    Coe(#[from] CoeError),
}

/// Energy receipt confirmation, produced by the consumer's meter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Erc {
    pub ctp_id: CtpId,
    pub energy_amount: u64,
    pub leaf_pk: PublicKey,
    pub coe: CoECertificate,
    pub proof: crate::merkle::MerkleProof,
    pub meter_sig: Signature,
}

pub fn erc_message(ctp_id: &CtpId, energy_amount: u64) -> Vec<u8> {
    [b"spb/erc".as_slice(), &ctp_id.0, &energy_amount.to_le_bytes()].concat()
}

impl Erc {
    pub fn verify_signature(&self) -> bool {
        verify(
            &erc_message(&self.ctp_id, self.energy_amount),
            &self.meter_sig,
            &self.leaf_pk,
        )
    }
}

pub fn make_ctp(
    consumer: &KeyPair,
    producer: Address,
    amount: u64,
    energy: u64,
    ttl_ms: SimTime,
    now: SimTime,
    nonce: u64,
) -> Result<Ctp, TradeError> {
    if ttl_ms == 0 {
        return Err(TradeError::ZeroTtl);
    }
    if amount == 0 || energy == 0 {
        return Err(TradeError::NonPositive);
    }
    Ok(Ctp::signed(consumer, producer, amount, energy, now + ttl_ms, nonce.to_le_bytes()))
}

/// Sign a receipt with the meter's next unused leaf key.
pub fn make_erc(meter: &mut MeterIdentity, ctp_id: CtpId, energy_amount: u64) -> Result<Erc, TradeError> {
    let (leaf, proof) = meter.next_signing_key()?;
    let coe = meter.certificate.clone().ok_or(CoeError::NoCertificate)?;
    Ok(Erc {
        ctp_id,
        energy_amount,
        leaf_pk: leaf.public_key,
        coe,
        proof,
        meter_sig: leaf.sign(&erc_message(&ctp_id, energy_amount)),
    })
}

/// Replace an exhausted meter's keys and have `signer` certify the new root.
pub fn refresh_certificate(meter: &mut MeterIdentity, signer: &MeterIdentity) -> Result<(), CoeError> {
    let root = meter.rebuild_tree()?;
    meter.install_certificate(issue_certificate(root, signer)?)
}

/// A receipt from a node that owns no manufacturer-certified key: it builds
/// its own tree and signs the root itself.
pub fn forge_erc(seed: [u8; 32], ctp_id: CtpId, energy_amount: u64) -> Erc {
    let fake_factory = generate_keypair(digest_parts(&[b"forger", &seed]).0);
    let leaf = generate_keypair(digest_parts(&[b"forged-leaf", &seed]).0);
    let tree = MerkleTree::from_leaves(vec![crate::coe::leaf_hash(&leaf.public_key)]).expect("one leaf");
    let root = tree.root();
    let coe = CoECertificate {
        root,
        signer_pk: fake_factory.public_key,
        signer_sig: fake_factory.sign(&crate::coe::root_message(&root)),
        manufacturer_cert: fake_factory.sign(&crate::coe::factory_message(&fake_factory.public_key)),
    };
    Erc {
        ctp_id,
        energy_amount,
        leaf_pk: leaf.public_key,
        coe,
        proof: tree.proof(0).expect("one leaf"),
        meter_sig: leaf.sign(&erc_message(&ctp_id, energy_amount)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Spb,
    Baseline,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Spb => "spb",
            Protocol::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TradeResult {
    SettledPaid,
    ExpiredRefunded,
    /// The miner refused the commitment; nothing was held.
    Rejected,
    /// Baseline only: nothing was delivered by the deadline and the escrowed
    /// price stays locked in the contract.
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TradeOutcome {
    pub trade: usize,
    pub protocol: Protocol,
    pub reliable: bool,
    pub ctp_id: Option<CtpId>,
    pub result: TradeResult,
    pub consumer_fee_paid: u64,
    pub producer_received: u64,
    pub e2e_delay_ms: SimTime,
    pub onchain_tx_count: usize,
    pub inclusions: usize,
    pub started_at: SimTime,
    pub finished_at: SimTime,
}

/// Outcome of feeding an event to a state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step<P> {
    Move(P),
    /// The event is legal here but changes nothing.
    Stay,
    Illegal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConsumerPhase {
    Idle,
    Committed,
    AwaitingMining,
    TimedOut,
    Done,
    Refunded,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsumerEvent {
    SendCtp,
    Stored,
    Rejected,
    ErcSent,
    ExpiryTimer,
    TimeoutDenied,
    Refunded,
    Included,
}

impl ConsumerPhase {
    pub const ALL: [ConsumerPhase; 7] = [
        ConsumerPhase::Idle,
        ConsumerPhase::Committed,
        ConsumerPhase::AwaitingMining,
        ConsumerPhase::TimedOut,
        ConsumerPhase::Done,
        ConsumerPhase::Refunded,
        ConsumerPhase::Rejected,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, ConsumerPhase::Done | ConsumerPhase::Refunded | ConsumerPhase::Rejected)
    }

    pub fn step(self, e: ConsumerEvent) -> Step<ConsumerPhase> {
        use ConsumerEvent as E;
        use ConsumerPhase as P;
        match (self, e) {
            (P::Idle, E::SendCtp) => Step::Move(P::Committed),
            (P::Committed | P::AwaitingMining | P::TimedOut, E::Stored) => Step::Stay,
            (P::Committed, E::Rejected) => Step::Move(P::Rejected),
            (P::Committed, E::ErcSent) => Step::Move(P::AwaitingMining),
            (P::Committed | P::AwaitingMining, E::ExpiryTimer) => Step::Move(P::TimedOut),
            (P::AwaitingMining | P::TimedOut, E::Included) => Step::Move(P::Done),
            (P::TimedOut, E::TimeoutDenied) => Step::Move(P::AwaitingMining),
            (P::TimedOut, E::Refunded) => Step::Move(P::Refunded),
            // A late meter receipt cannot revive a timed-out commitment.
            (P::TimedOut | P::Refunded, E::ErcSent) => Step::Stay,
            (P::Done, E::ExpiryTimer | E::TimeoutDenied) => Step::Stay,
            _ => Step::Illegal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProducerPhase {
    Listed,
    Transferring,
    Delivered,
    Withheld,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProducerEvent {
    /// The trade is funded: CTP stored, or escrow paid in.
    Funded { reliable: bool },
    TransferDone,
}

impl ProducerPhase {
    pub const ALL: [ProducerPhase; 4] = [
        ProducerPhase::Listed,
        ProducerPhase::Transferring,
        ProducerPhase::Delivered,
        ProducerPhase::Withheld,
    ];

    pub fn step(self, e: ProducerEvent) -> Step<ProducerPhase> {
        use ProducerEvent as E;
        use ProducerPhase as P;
        match (self, e) {
            (P::Listed, E::Funded { reliable: true }) => Step::Move(P::Transferring),
            (P::Listed, E::Funded { reliable: false }) => Step::Move(P::Withheld),
            (P::Transferring, E::TransferDone) => Step::Move(P::Delivered),
            _ => Step::Illegal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeterPhase {
    Waiting,
    Signing,
    Sent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeterEvent {
    EnergyDelivered,
    ReceiptReady,
}

impl MeterPhase {
    pub const ALL: [MeterPhase; 3] = [MeterPhase::Waiting, MeterPhase::Signing, MeterPhase::Sent];

    pub fn step(self, e: MeterEvent) -> Step<MeterPhase> {
        match (self, e) {
            (MeterPhase::Waiting, MeterEvent::EnergyDelivered) => Step::Move(MeterPhase::Signing),
            (MeterPhase::Signing, MeterEvent::ReceiptReady) => Step::Move(MeterPhase::Sent),
            _ => Step::Illegal,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coe::{verify_coe, Manufacturer};
    use crate::crypto::{keypair_from_label, Hash};

    const CONSUMER_EVENTS: [ConsumerEvent; 8] = [
        ConsumerEvent::SendCtp,
        ConsumerEvent::Stored,
        ConsumerEvent::Rejected,
        ConsumerEvent::ErcSent,
        ConsumerEvent::ExpiryTimer,
        ConsumerEvent::TimeoutDenied,
        ConsumerEvent::Refunded,
        ConsumerEvent::Included,
    ];

    fn certified_meters() -> (Manufacturer, MeterIdentity, MeterIdentity) {
        let m = Manufacturer::new(keypair_from_label(b"manufacturer"));
        let mut a = m.provision([1; 32], 4).unwrap();
        let b = m.provision([2; 32], 4).unwrap();
        a.install_certificate(issue_certificate(a.tree.root(), &b).unwrap()).unwrap();
        (m, a, b)
    }

    #[test]
    fn make_ctp_sets_expiry_and_signs() {
        let kp = keypair_from_label(b"c");
        let ctp = make_ctp(&kp, Address([2; 20]), 40, 50, 60_000, 1_000, 7).unwrap();
        assert_eq!(ctp.expiry_time, 61_000);
        assert_eq!((ctp.amount, ctp.energy), (40, 50));
        let mut l = crate::ledger::Ledger::new();
        l.open_keyed(kp.public_key, 0).unwrap();
        assert!(ctp.verify_signature(&l));
        assert_eq!(make_ctp(&kp, Address([2; 20]), 40, 50, 0, 0, 7), Err(TradeError::ZeroTtl));
    }

    #[test]
    fn receipts_rotate_leaf_keys_and_verify() {
        let (m, mut a, _) = certified_meters();
        let id = Hash([5; 32]);
        let e1 = make_erc(&mut a, id, 50).unwrap();
        let e2 = make_erc(&mut a, id, 50).unwrap();
        assert_ne!(e1.leaf_pk, e2.leaf_pk);
        for e in [&e1, &e2] {
            assert!(e.verify_signature());
            assert!(verify_coe(&e.coe, &e.leaf_pk, &e.proof, &m.public_key()));
        }
        let mut tampered = e1.clone();
        tampered.energy_amount = 51;
        assert!(!tampered.verify_signature());
    }

    #[test]
    fn exhausted_meter_refreshes() {
        let (m, mut a, b) = certified_meters();
        for _ in 0..4 {
            make_erc(&mut a, Hash::ZERO, 1).unwrap();
        }
        assert_eq!(make_erc(&mut a, Hash::ZERO, 1), Err(TradeError::Coe(CoeError::ExhaustedKeys(4))));
        refresh_certificate(&mut a, &b).unwrap();
        let e = make_erc(&mut a, Hash::ZERO, 1).unwrap();
        assert!(verify_coe(&e.coe, &e.leaf_pk, &e.proof, &m.public_key()));
    }

    #[test]
    fn forged_receipt_fails_coe_but_signs_correctly() {
        let (m, _, _) = certified_meters();
        let e = forge_erc([9; 32], Hash([1; 32]), 50);
        assert!(e.verify_signature());
        assert!(!verify_coe(&e.coe, &e.leaf_pk, &e.proof, &m.public_key()));
    }

    #[test]
    fn consumer_reliable_and_refund_paths() {
        use ConsumerEvent as E;
        let run = |events: &[E]| {
            events.iter().fold(ConsumerPhase::Idle, |p, e| match p.step(*e) {
                Step::Move(n) => n,
                Step::Stay => p,
                Step::Illegal => panic!("{p:?} on {e:?}"),
            })
        };
        assert_eq!(run(&[E::SendCtp, E::Stored, E::ErcSent, E::Included]), ConsumerPhase::Done);
        assert_eq!(run(&[E::SendCtp, E::Stored, E::ExpiryTimer, E::Refunded]), ConsumerPhase::Refunded);
        assert_eq!(
            run(&[E::SendCtp, E::ErcSent, E::ExpiryTimer, E::TimeoutDenied, E::Included, E::ExpiryTimer]),
            ConsumerPhase::Done
        );
        assert_eq!(run(&[E::SendCtp, E::Rejected]), ConsumerPhase::Rejected);
    }

    #[test]
    fn consumer_table_is_total_and_never_leaves_terminal() {
        let mut moves = 0;
        for p in ConsumerPhase::ALL {
            for e in CONSUMER_EVENTS {
                match p.step(e) {
                    Step::Move(n) => {
                        moves += 1;
                        assert!(!p.is_terminal(), "{p:?} left a terminal phase");
                        assert_ne!(n, ConsumerPhase::Idle);
                    }
                    Step::Stay | Step::Illegal => {}
                }
            }
        }
        assert_eq!(moves, 9);
        // Nothing but SendCtp is legal before a CTP exists.
        for e in CONSUMER_EVENTS.into_iter().filter(|e| *e != ConsumerEvent::SendCtp) {
            assert_eq!(ConsumerPhase::Idle.step(e), Step::Illegal);
        }
    }

    #[test]
    fn producer_and_meter_tables() {
        use ProducerEvent as E;
        assert_eq!(ProducerPhase::Listed.step(E::Funded { reliable: true }), Step::Move(ProducerPhase::Transferring));
        assert_eq!(ProducerPhase::Listed.step(E::Funded { reliable: false }), Step::Move(ProducerPhase::Withheld));
        assert_eq!(ProducerPhase::Listed.step(E::TransferDone), Step::Illegal);
        for p in [ProducerPhase::Delivered, ProducerPhase::Withheld] {
            for e in [E::Funded { reliable: true }, E::Funded { reliable: false }, E::TransferDone] {
                assert_eq!(p.step(e), Step::Illegal);
            }
        }
        assert_eq!(MeterPhase::Waiting.step(MeterEvent::ReceiptReady), Step::Illegal);
        assert_eq!(MeterPhase::Signing.step(MeterEvent::ReceiptReady), Step::Move(MeterPhase::Sent));
        for e in [MeterEvent::EnergyDelivered, MeterEvent::ReceiptReady] {
            assert_eq!(MeterPhase::Sent.step(e), Step::Illegal);
        }
    }
}
