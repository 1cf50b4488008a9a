//! Backbone routing overlay and price negotiation.
//!
//! Backbone nodes own most-significant-bit prefixes of the public-key space
//! and relay negotiation messages as unicasts: sender's backbone, then the
//! destination's backbone, then the registered endpoint.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Writer;
use crate::crypto::{digest, verify, Hash, KeyPair, PublicKey, Signature};
use crate::market::Offer;
use crate::sim::NodeId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OverlayError {
    #[error("backbone prefixes do not partition the key space: {0}")]
    NotAPartition(String),
    #[error("key {pk} already registered to node {existing}, not {requested}")]
    ConflictingRegistration {
        pk: PublicKey,
        existing: NodeId,
        requested: NodeId,
    },
    #[error("no endpoint registered for {0}")]
    NoRoute(PublicKey),
    #[error("message signature does not verify")]
    BadSignature,
    #[error("offer is not negotiable")]
    NotNegotiable,
    #[error("bad negotiation terms: {0}")]
    BadTerms(&'static str),
}

/// A most-significant-bit prefix, at most 64 bits long.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Prefix {
    /// Prefix bits, right-aligned.
    pub bits: u64,
    pub len: u8,
}

impl Prefix {
    pub fn new(bits: u64, len: u8) -> Self {
        assert!(len <= 64 && (len == 64 || bits >> len == 0), "prefix bits exceed its length");
        Self { bits, len }
    }

    /// Parse a string of `0`/`1` characters.
    pub fn parse(s: &str) -> Option<Self> {
        if s.len() > 64 || !s.bytes().all(|b| b == b'0' || b == b'1') {
            return None;
        }
        let bits = s.bytes().fold(0u64, |acc, b| (acc << 1) | u64::from(b - b'0'));
        Some(Self::new(bits, s.len() as u8))
    }

    pub fn matches(&self, pk: &PublicKey) -> bool {
        self.len == 0 || top_bits(pk, self.len) == self.bits
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in (0..self.len).rev() {
            write!(f, "{}", (self.bits >> i) & 1)?;
        }
        Ok(())
    }
}

/// First `n` bits of the key, right-aligned.
fn top_bits(pk: &PublicKey, n: u8) -> u64 {
    let mut word = [0u8; 8];
    word.copy_from_slice(&pk.as_bytes()[..8]);
    let w = u64::from_be_bytes(word);
    if n == 0 {
        0
    } else {
        w >> (64 - u32::from(n))
    }
}

fn bit(pk: &PublicKey, i: usize) -> usize {
    usize::from((pk.as_bytes()[i / 8] >> (7 - i % 8)) & 1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneNode {
    pub node: NodeId,
    pub prefix: Prefix,
    pub registrations: BTreeMap<PublicKey, NodeId>,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    child: [Option<usize>; 2],
    backbone: Option<usize>,
}

/// Path of one routed message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Delivery {
    pub msg_id: Hash,
    /// Backbone hops then the endpoint; the destination backbone is omitted
    /// when it is the sender's.
    pub hops: Vec<NodeId>,
}

impl Delivery {
    pub fn endpoint(&self) -> NodeId {
        *self.hops.last().expect("non-empty path")
    }

    /// `msg_id,hop1,hop2,hop3`, unused hops left empty.
    pub fn trace_line(&self) -> String {
        let mut cols: Vec<String> = self.hops.iter().map(|h| h.0.to_string()).collect();
        cols.resize(3, String::new());
        format!("{},{}", self.msg_id, cols.join(","))
    }
}

#[derive(Debug, Clone)]
pub struct Overlay {
    backbones: Vec<BackboneNode>,
    trie: Vec<TrieNode>,
    deliveries: Vec<Delivery>,
}

impl Overlay {
    /// Backbones from `(node, prefix)` pairs that must partition the key space.
    pub fn new(layout: &[(NodeId, Prefix)]) -> Result<Self, OverlayError> {
        // Kraft sum over a prefix-free set equals one exactly when exhaustive.
        let mut kraft: u128 = 0;
        let mut trie = vec![TrieNode::default()];
        for (i, (_, p)) in layout.iter().enumerate() {
            kraft += 1u128 << (64 - u32::from(p.len));
            let mut at = 0;
            for k in (0..p.len).rev() {
                if trie[at].backbone.is_some() {
                    return Err(OverlayError::NotAPartition(format!("{p} extends another prefix")));
                }
                let b = ((p.bits >> k) & 1) as usize;
                at = match trie[at].child[b] {
                    Some(c) => c,
                    None => {
                        trie.push(TrieNode::default());
                        let c = trie.len() - 1;
                        trie[at].child[b] = Some(c);
                        c
                    }
                };
            }
            if trie[at].backbone.is_some() || trie[at].child.iter().any(Option::is_some) {
                return Err(OverlayError::NotAPartition(format!("{p} overlaps another prefix")));
            }
            trie[at].backbone = Some(i);
        }
        if kraft != 1u128 << 64 {
            return Err(OverlayError::NotAPartition("prefixes leave keys uncovered".into()));
        }
        let backbones = layout
            .iter()
            .map(|&(node, prefix)| BackboneNode {
                node,
                prefix,
                registrations: BTreeMap::new(),
            })
            .collect();
        Ok(Self {
            backbones,
            trie,
            deliveries: Vec::new(),
        })
    }

    /// All `2^bits` prefixes of one length, on nodes `first_node..`.
    pub fn uniform(bits: u8, first_node: u32) -> Self {
        let layout: Vec<(NodeId, Prefix)> = (0..1u64 << bits)
            .map(|v| (NodeId(first_node + v as u32), Prefix::new(v, bits)))
            .collect();
        Self::new(&layout).expect("uniform prefixes partition")
    }

    pub fn backbones(&self) -> &[BackboneNode] {
        &self.backbones
    }

    fn index_of(&self, pk: &PublicKey) -> usize {
        let mut at = 0;
        let mut depth = 0;
        loop {
            if let Some(i) = self.trie[at].backbone {
                return i;
            }
            at = self.trie[at].child[bit(pk, depth)].expect("partition covers every key");
            depth += 1;
        }
    }

    /// The backbone responsible for `pk`.
    pub fn assign_backbone(&self, pk: &PublicKey) -> &BackboneNode {
        &self.backbones[self.index_of(pk)]
    }

    pub fn register(&mut self, pk: PublicKey, endpoint: NodeId) -> Result<(), OverlayError> {
        let i = self.index_of(&pk);
        let regs = &mut self.backbones[i].registrations;
        match regs.get(&pk) {
            Some(&existing) if existing != endpoint => Err(OverlayError::ConflictingRegistration {
                pk,
                existing,
                requested: endpoint,
            }),
            _ => {
                regs.insert(pk, endpoint);
                Ok(())
            }
        }
    }

    pub fn endpoint_of(&self, pk: &PublicKey) -> Option<NodeId> {
        self.assign_backbone(pk).registrations.get(pk).copied()
    }

    /// Route one message; failures leave no trace and never fall back to broadcast.
    pub fn route(&mut self, msg: &NegotiationMsg) -> Result<Delivery, OverlayError> {
        if !msg.verify() {
            return Err(OverlayError::BadSignature);
        }
        let endpoint = self.endpoint_of(&msg.dest_pk).ok_or(OverlayError::NoRoute(msg.dest_pk))?;
        let from = self.assign_backbone(&msg.sender_pk).node;
        let to = self.assign_backbone(&msg.dest_pk).node;
        let mut hops = vec![from];
        if to != from {
            hops.push(to);
        }
        hops.push(endpoint);
        let d = Delivery { msg_id: msg.id(), hops };
        self.deliveries.push(d.clone());
        Ok(d)
    }

    /// Every successful delivery, in order.
    pub fn deliveries(&self) -> &[Delivery] {
        &self.deliveries
    }

    pub fn hop_trace(&self) -> String {
        self.deliveries.iter().map(|d| d.trace_line() + "\n").collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegotiationKind {
    Offer,
    Counter,
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegotiationMsg {
    pub kind: NegotiationKind,
    pub ctx: Hash,
    pub price_per_kwh: u64,
    pub energy: u64,
    pub sender_pk: PublicKey,
    pub dest_pk: PublicKey,
    pub signature: Signature,
}

impl NegotiationMsg {
    pub fn signed(kp: &KeyPair, kind: NegotiationKind, ctx: Hash, price_per_kwh: u64, energy: u64, dest_pk: PublicKey) -> Self {
        let mut m = Self {
            kind,
            ctx,
            price_per_kwh,
            energy,
            sender_pk: kp.public_key,
            dest_pk,
            signature: Signature([0; 64]),
        };
        m.signature = kp.sign(&m.signing_bytes());
        m
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(b"spb/negotiation");
        w.u8(self.kind as u8);
        w.fixed(&self.ctx.0);
        w.u64(self.price_per_kwh);
        w.u64(self.energy);
        w.fixed(self.sender_pk.as_bytes());
        w.fixed(self.dest_pk.as_bytes());
        w.finish()
    }

    pub fn verify(&self) -> bool {
        verify(&self.signing_bytes(), &self.signature, &self.sender_pk)
    }

    pub fn id(&self) -> Hash {
        let mut b = self.signing_bytes();
        b.extend_from_slice(&self.signature.0);
        digest(&b)
    }
}

/// The consumer's side of a negotiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bidding {
    pub opening: u64,
    pub ceiling: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NegotiationOutcome {
    AgreedPrice(u64),
    NoDeal,
}

#[derive(Debug, Clone)]
pub struct Negotiation {
    pub outcome: NegotiationOutcome,
    pub rounds: u32,
    pub transcript: Vec<NegotiationMsg>,
    pub deliveries: Vec<Delivery>,
}

fn midpoint(a: u64, b: u64) -> u64 {
    a.min(b) + a.abs_diff(b) / 2
}

/// Midpoint concession over at most `max_rounds` consumer messages.
///
/// The consumer accepts any ask within its ceiling, otherwise bids, starting
/// at its opening and moving halfway to its ceiling each round. The producer
/// accepts any bid at or above its floor, otherwise counters halfway between
/// the bid and its ask (never below the floor), and rejects on the last round.
pub fn negotiate(
    overlay: &mut Overlay,
    consumer: &KeyPair,
    producer: &KeyPair,
    offer: &Offer,
    bidding: Bidding,
    floor: u64,
    max_rounds: u32,
) -> Result<Negotiation, OverlayError> {
    if !offer.negotiable {
        return Err(OverlayError::NotNegotiable);
    }
    if bidding.opening > bidding.ceiling {
        return Err(OverlayError::BadTerms("opening bid above ceiling"));
    }
    if floor > offer.price_per_kwh {
        return Err(OverlayError::BadTerms("floor above list price"));
    }
    if max_rounds == 0 {
        return Err(OverlayError::BadTerms("max_rounds must be positive"));
    }
    let ctx = digest(&[consumer.public_key.as_bytes().as_slice(), offer.producer.0.as_slice(), &offer.price_per_kwh.to_le_bytes()].concat());
    let energy = offer.energy;
    let (cpk, ppk) = (consumer.public_key, producer.public_key);
    let mut n = Negotiation {
        outcome: NegotiationOutcome::NoDeal,
        rounds: 0,
        transcript: Vec::new(),
        deliveries: Vec::new(),
    };
    let mut send = |n: &mut Negotiation, m: NegotiationMsg| -> Result<(), OverlayError> {
        n.deliveries.push(overlay.route(&m)?);
        n.transcript.push(m);
        Ok(())
    };
    let mut ask = offer.price_per_kwh;
    let mut bid: Option<u64> = None;
    for round in 1..=max_rounds {
        n.rounds = round;
        if ask <= bidding.ceiling {
            send(&mut n, NegotiationMsg::signed(consumer, NegotiationKind::Accept, ctx, ask, energy, ppk))?;
            n.outcome = NegotiationOutcome::AgreedPrice(ask);
            return Ok(n);
        }
        let b = bid.map_or(bidding.opening, |b| midpoint(b, bidding.ceiling));
        bid = Some(b);
        send(&mut n, NegotiationMsg::signed(consumer, NegotiationKind::Offer, ctx, b, energy, ppk))?;
        if b >= floor {
            send(&mut n, NegotiationMsg::signed(producer, NegotiationKind::Accept, ctx, b, energy, cpk))?;
            n.outcome = NegotiationOutcome::AgreedPrice(b);
            return Ok(n);
        }
        if round == max_rounds {
            send(&mut n, NegotiationMsg::signed(producer, NegotiationKind::Reject, ctx, b, energy, cpk))?;
            break;
        }
        ask = floor.max(midpoint(b, ask));
        send(&mut n, NegotiationMsg::signed(producer, NegotiationKind::Counter, ctx, ask, energy, cpk))?;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keypair_from_label;
    use proptest::prelude::*;

    fn pk_with_top_byte(b: u8, salt: u64) -> PublicKey {
        let mut bytes = *digest(&salt.to_le_bytes()).as_bytes();
        bytes[0] = b;
        PublicKey(bytes)
    }

    /// Brute-force longest matching prefix.
    fn oracle(pk: &PublicKey, bbs: &[BackboneNode]) -> usize {
        let mut best: Option<usize> = None;
        for (i, b) in bbs.iter().enumerate() {
            if b.prefix.matches(pk) && best.is_none_or(|j| bbs[j].prefix.len < b.prefix.len) {
                best = Some(i);
            }
        }
        best.expect("some prefix matches")
    }

    fn uneven() -> Overlay {
        let p = |s| Prefix::parse(s).unwrap();
        Overlay::new(&[(NodeId(0), p("0")), (NodeId(1), p("10")), (NodeId(2), p("11"))]).unwrap()
    }

    #[test]
    fn uneven_partition_assigns_by_prefix() {
        let o = uneven();
        assert_eq!(o.assign_backbone(&pk_with_top_byte(0b0110_0000, 1)).prefix.to_string(), "0");
        assert_eq!(o.assign_backbone(&pk_with_top_byte(0b1011_1111, 2)).prefix.to_string(), "10");
        assert_eq!(o.assign_backbone(&pk_with_top_byte(0b1100_0000, 3)).prefix.to_string(), "11");
    }

    #[test]
    fn non_partitions_rejected() {
        let p = |s| Prefix::parse(s).unwrap();
        for bad in [vec!["0", "10"], vec!["0", "01", "1"], vec!["1", "0", "1"], vec!["00", "0", "1"]] {
            let layout: Vec<_> = bad.iter().enumerate().map(|(i, s)| (NodeId(i as u32), p(s))).collect();
            assert!(matches!(Overlay::new(&layout), Err(OverlayError::NotAPartition(_))), "{bad:?}");
        }
    }

    #[test]
    fn registration_rules() {
        let mut o = Overlay::uniform(2, 100);
        let a = pk_with_top_byte(0x00, 1);
        let b = pk_with_top_byte(0xC0, 2);
        o.register(a, NodeId(8)).unwrap();
        o.register(b, NodeId(8)).unwrap();
        let holding: Vec<_> = o.backbones().iter().filter(|bb| bb.registrations.values().any(|&n| n == NodeId(8))).collect();
        assert_eq!(holding.len(), 2);
        o.register(a, NodeId(8)).unwrap();
        assert_eq!(
            o.register(a, NodeId(9)),
            Err(OverlayError::ConflictingRegistration { pk: a, existing: NodeId(8), requested: NodeId(9) })
        );
    }

    #[test]
    fn routes_in_at_most_three_hops_and_never_falls_back() {
        let mut o = Overlay::uniform(2, 100);
        let s = keypair_from_label(b"s");
        let d = keypair_from_label(b"d");
        o.register(s.public_key, NodeId(1)).unwrap();
        let m = NegotiationMsg::signed(&s, NegotiationKind::Offer, Hash([0; 32]), 5, 10, d.public_key);
        assert_eq!(o.route(&m), Err(OverlayError::NoRoute(d.public_key)));
        assert!(o.deliveries().is_empty());
        o.register(d.public_key, NodeId(2)).unwrap();
        let del = o.route(&m).unwrap();
        assert!(del.hops.len() <= 3);
        assert_eq!(del.endpoint(), NodeId(2));
        assert_eq!(del.hops[0], o.assign_backbone(&s.public_key).node);
        assert_eq!(o.hop_trace().lines().count(), 1);
        let mut forged = m.clone();
        forged.price_per_kwh = 1;
        assert_eq!(o.route(&forged), Err(OverlayError::BadSignature));
    }

    fn setup(list: u64) -> (Overlay, KeyPair, KeyPair, Offer) {
        let mut o = Overlay::uniform(2, 100);
        let c = keypair_from_label(b"consumer");
        let p = keypair_from_label(b"producer");
        o.register(c.public_key, NodeId(1)).unwrap();
        o.register(p.public_key, NodeId(2)).unwrap();
        let offer = Offer {
            producer: p.address(),
            energy: 50,
            price_per_kwh: list,
            negotiable: true,
        };
        (o, c, p, offer)
    }

    #[test]
    fn ceiling_at_list_accepts_immediately() {
        let (mut o, c, p, offer) = setup(10);
        let n = negotiate(&mut o, &c, &p, &offer, Bidding { opening: 5, ceiling: 10 }, 8, 4).unwrap();
        assert_eq!(n.outcome, NegotiationOutcome::AgreedPrice(10));
        assert_eq!(n.transcript.len(), 1);
    }

    #[test]
    fn ceiling_below_floor_is_no_deal() {
        let (mut o, c, p, offer) = setup(10);
        let n = negotiate(&mut o, &c, &p, &offer, Bidding { opening: 4, ceiling: 6 }, 8, 4).unwrap();
        assert_eq!(n.outcome, NegotiationOutcome::NoDeal);
        assert_eq!(n.rounds, 4);
        assert_eq!(n.transcript.last().unwrap().kind, NegotiationKind::Reject);
    }

    #[test]
    fn hand_computed_counter_sequence() {
        // Ask 10 over ceiling 9: bid 6 under floor 7, counter max(7, (6+10)/2) = 8, accepted.
        let (mut o, c, p, offer) = setup(10);
        let n = negotiate(&mut o, &c, &p, &offer, Bidding { opening: 6, ceiling: 9 }, 7, 4).unwrap();
        assert_eq!(n.outcome, NegotiationOutcome::AgreedPrice(8));
        assert!(n.rounds <= 3);
        let kinds: Vec<_> = n.transcript.iter().map(|m| (m.kind, m.price_per_kwh)).collect();
        assert_eq!(kinds, vec![(NegotiationKind::Offer, 6), (NegotiationKind::Counter, 8), (NegotiationKind::Accept, 8)]);
    }

    #[test]
    fn non_negotiable_offer_refused() {
        let (mut o, c, p, mut offer) = setup(10);
        offer.negotiable = false;
        assert_eq!(
            negotiate(&mut o, &c, &p, &offer, Bidding { opening: 6, ceiling: 9 }, 7, 4).unwrap_err(),
            OverlayError::NotNegotiable
        );
    }

    proptest! {
        #[test]
        fn assignment_matches_oracle(bits in 1u8..=6, seeds in proptest::collection::vec(any::<[u8; 32]>(), 1..64)) {
            let o = Overlay::uniform(bits, 0);
            for s in seeds {
                let pk = PublicKey(s);
                prop_assert_eq!(o.index_of(&pk), oracle(&pk, o.backbones()));
            }
        }

        #[test]
        fn agreed_price_within_bounds(list in 1u64..200, floor_frac in 0u64..=100, ceiling in 0u64..250, open_frac in 0u64..=100, rounds in 1u32..8) {
            let floor = list * floor_frac / 100;
            let opening = ceiling * open_frac / 100;
            let (mut o, c, p, offer) = setup(list);
            let n = negotiate(&mut o, &c, &p, &offer, Bidding { opening, ceiling }, floor, rounds).unwrap();
            prop_assert!(n.rounds <= rounds);
            prop_assert_eq!(n.deliveries.len(), n.transcript.len());
            for w in n.transcript.windows(2) {
                if w[1].kind == NegotiationKind::Accept {
                    prop_assert_eq!(w[1].price_per_kwh, w[0].price_per_kwh);
                }
            }
            for (m, d) in n.transcript.iter().zip(&n.deliveries) {
                prop_assert!(m.verify());
                prop_assert_eq!(Some(d.endpoint()), o.endpoint_of(&m.dest_pk));
            }
            if let NegotiationOutcome::AgreedPrice(price) = n.outcome {
                prop_assert!(floor <= price && price <= ceiling);
            }
        }
    }
}
