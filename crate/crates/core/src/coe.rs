//! Certificates of Existence for smart meters.
//!
//! A meter holds a factory key certified by the manufacturer CA. It derives a
//! batch of one-time leaf keys, commits to them with a Merkle tree, and asks a
//! peer meter to sign the root. An ERC signed by a leaf key then carries the
//! leaf public key, its membership proof and the certificate, which anyone
//! holding the manufacturer public key can check without learning which meter
//! produced it.
//!
//! Signed messages are domain separated:
//!
//! * manufacturer certificate: `sign(ca, "spb/factory-key" ‖ factory_pk)`
//! * root signature: `sign(signer, "spb/coe-root" ‖ root)`
//!
//! Wire layout of a CoE bundle (certificate followed by proof):
//!
//! ```text
//! root(32) ‖ signer_pk(32) ‖ signer_sig(64) ‖ manufacturer_cert(64)
//!   ‖ leaf_index(u64) ‖ n(u64) ‖ n × (side(u8) ‖ sibling(32))
//! ```
//!
//! The signing meter signs whatever root it is handed; it has no way to check
//! that the leaves are keys the requester actually holds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::{digest, digest_parts, generate_keypair, verify, Hash, KeyPair, PublicKey, Signature};
use crate::merkle::{MerkleError, MerkleProof, MerkleTree};

pub const DEFAULT_TREE_WIDTH: usize = 16;

const FACTORY_KEY_TAG: &[u8] = b"spb/factory-key";
const COE_ROOT_TAG: &[u8] = b"spb/coe-root";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoeError {
    #[error(transparent)]
    Merkle(#[from] MerkleError),
    #[error("meter has no manufacturer certificate for its factory key")]
    NotCertified,
    #[error("meter has no certificate of existence for its current tree")]
    NoCertificate,
    #[error("certificate root does not match the meter's tree")]
    RootMismatch,
    #[error("all {0} leaf keys are used; rebuild the tree and obtain a new certificate")]
    ExhaustedKeys(usize),
    #[error("tree width must be a power of two, got {0}")]
    BadWidth(usize),
}

pub fn leaf_hash(pk: &PublicKey) -> Hash {
    digest(&pk.0)
}

pub fn build_merkle_tree(pks: &[PublicKey]) -> Result<MerkleTree, MerkleError> {
    MerkleTree::from_leaves(pks.iter().map(leaf_hash).collect())
}

pub fn membership_proof(tree: &MerkleTree, leaf_index: usize) -> Result<MerkleProof, MerkleError> {
    tree.proof(leaf_index)
}

pub fn factory_message(pk: &PublicKey) -> Vec<u8> {
    [FACTORY_KEY_TAG, &pk.0].concat()
}

pub fn root_message(root: &Hash) -> Vec<u8> {
    [COE_ROOT_TAG, &root.0].concat()
}

/// The manufacturer certificate authority.
#[derive(Debug, Clone)]
pub struct Manufacturer {
    keypair: KeyPair,
}

impl Manufacturer {
    pub fn new(keypair: KeyPair) -> Self {
        Self { keypair }
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public_key
    }

    pub fn certify(&self, factory_pk: &PublicKey) -> Signature {
        self.keypair.sign(&factory_message(factory_pk))
    }

    /// Provision a meter with a factory key derived from `seed`.
    pub fn provision(&self, seed: [u8; 32], tree_width: usize) -> Result<MeterIdentity, CoeError> {
        let mut meter = MeterIdentity::new(seed, tree_width)?;
        meter.factory_cert = Some(self.certify(&meter.factory_keypair.public_key));
        Ok(meter)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoECertificate {
    pub root: Hash,
    pub signer_pk: PublicKey,
    pub signer_sig: Signature,
    pub manufacturer_cert: Signature,
}

impl CoECertificate {
    pub const ENCODED_LEN: usize = 32 + 32 + 64 + 64;

    pub fn encode(&self, w: &mut Writer) {
        w.fixed(&self.root.0)
            .fixed(&self.signer_pk.0)
            .fixed(&self.signer_sig.0)
            .fixed(&self.manufacturer_cert.0);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            root: Hash(r.fixed()?),
            signer_pk: PublicKey(r.fixed()?),
            signer_sig: Signature(r.fixed()?),
            manufacturer_cert: Signature(r.fixed()?),
        })
    }
}

pub fn encode_bundle(cert: &CoECertificate, proof: &MerkleProof) -> Vec<u8> {
    let mut w = Writer::new();
    cert.encode(&mut w);
    proof.encode(&mut w);
    w.finish()
}

pub fn decode_bundle(bytes: &[u8]) -> Result<(CoECertificate, MerkleProof), DecodeError> {
    let mut r = Reader::new(bytes);
    let cert = CoECertificate::decode(&mut r)?;
    let proof = MerkleProof::decode(&mut r)?;
    r.finish()?;
    Ok((cert, proof))
}

/// Sign `root` as `signer`, producing a certificate for another meter's tree.
pub fn issue_certificate(root: Hash, signer: &MeterIdentity) -> Result<CoECertificate, CoeError> {
    let manufacturer_cert = signer.factory_cert.ok_or(CoeError::NotCertified)?;
    Ok(CoECertificate {
        root,
        signer_pk: signer.factory_keypair.public_key,
        signer_sig: signer.factory_keypair.sign(&root_message(&root)),
        manufacturer_cert,
    })
}

pub fn verify_coe(
    cert: &CoECertificate,
    pk: &PublicKey,
    proof: &MerkleProof,
    manufacturer_pk: &PublicKey,
) -> bool {
    verify(&factory_message(&cert.signer_pk), &cert.manufacturer_cert, manufacturer_pk)
        && verify(&root_message(&cert.root), &cert.signer_sig, &cert.signer_pk)
        && proof.verify(&leaf_hash(pk), &cert.root)
}

#[derive(Debug, Clone)]
pub struct MeterIdentity {
    pub factory_keypair: KeyPair,
    pub factory_cert: Option<Signature>,
    pub leaf_keypairs: Vec<KeyPair>,
    pub tree: MerkleTree,
    pub certificate: Option<CoECertificate>,
    pub next_leaf: usize,
    seed: [u8; 32],
    generation: u64,
}

impl MeterIdentity {
    /// A meter whose factory key is not certified by anyone.
    pub fn new(seed: [u8; 32], tree_width: usize) -> Result<Self, CoeError> {
        if !tree_width.is_power_of_two() {
            return Err(CoeError::BadWidth(tree_width));
        }
        let factory_keypair = generate_keypair(digest_parts(&[b"factory", &seed]).0);
        let leaf_keypairs = derive_leaves(&seed, 0, tree_width);
        let tree = build_merkle_tree(&leaf_keypairs.iter().map(|k| k.public_key).collect::<Vec<_>>())?;
        Ok(Self {
            factory_keypair,
            factory_cert: None,
            leaf_keypairs,
            tree,
            certificate: None,
            next_leaf: 0,
            seed,
            generation: 0,
        })
    }

    pub fn tree_width(&self) -> usize {
        self.leaf_keypairs.len()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn remaining_keys(&self) -> usize {
        self.tree_width() - self.next_leaf
    }

    pub fn install_certificate(&mut self, cert: CoECertificate) -> Result<(), CoeError> {
        if cert.root != self.tree.root() {
            return Err(CoeError::RootMismatch);
        }
        self.certificate = Some(cert);
        Ok(())
    }

    /// Replace the leaf keys with a fresh batch. The old certificate is
    /// dropped; a new one must be installed before signing resumes.
    pub fn rebuild_tree(&mut self) -> Result<Hash, CoeError> {
        self.generation += 1;
        self.leaf_keypairs = derive_leaves(&self.seed, self.generation, self.tree_width());
        let pks: Vec<PublicKey> = self.leaf_keypairs.iter().map(|k| k.public_key).collect();
        self.tree = build_merkle_tree(&pks)?;
        self.certificate = None;
        self.next_leaf = 0;
        Ok(self.tree.root())
    }

    /// Hand out the next unused leaf key and its proof. Keys are never reused.
    pub fn next_signing_key(&mut self) -> Result<(KeyPair, MerkleProof), CoeError> {
        if self.next_leaf >= self.tree_width() {
            return Err(CoeError::ExhaustedKeys(self.tree_width()));
        }
        if self.certificate.is_none() {
            return Err(CoeError::NoCertificate);
        }
        let idx = self.next_leaf;
        let proof = self.tree.proof(idx)?;
        self.next_leaf += 1;
        Ok((self.leaf_keypairs[idx].clone(), proof))
    }
}

fn derive_leaves(seed: &[u8; 32], generation: u64, width: usize) -> Vec<KeyPair> {
    (0..width as u64)
        .map(|i| {
            let s = digest_parts(&[b"leaf", seed, &generation.to_le_bytes(), &i.to_le_bytes()]);
            generate_keypair(s.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keypair_from_label;
    use std::collections::HashSet;

    fn manufacturer() -> Manufacturer {
        Manufacturer::new(keypair_from_label(b"ca"))
    }

    fn seed(i: u8) -> [u8; 32] {
        [i; 32]
    }

    fn certified_pair(ca: &Manufacturer) -> (MeterIdentity, MeterIdentity) {
        let mut a = ca.provision(seed(1), 16).unwrap();
        let b = ca.provision(seed(2), 16).unwrap();
        let cert = issue_certificate(a.tree.root(), &b).unwrap();
        a.install_certificate(cert).unwrap();
        (a, b)
    }

    #[test]
    fn single_pk_root() {
        let pk = keypair_from_label(b"x").public_key;
        let t = build_merkle_tree(&[pk]).unwrap();
        assert_eq!(t.root(), digest(&digest(&pk.0).0));
    }

    #[test]
    fn leaf_order_matters() {
        let a = keypair_from_label(b"a").public_key;
        let b = keypair_from_label(b"b").public_key;
        assert_ne!(
            build_merkle_tree(&[a, b]).unwrap().root(),
            build_merkle_tree(&[b, a]).unwrap().root()
        );
        assert_eq!(build_merkle_tree(&[]), Err(MerkleError::Empty));
    }

    #[test]
    fn genuine_meter_verifies() {
        let ca = manufacturer();
        let (mut a, _) = certified_pair(&ca);
        let (kp, proof) = a.next_signing_key().unwrap();
        let cert = a.certificate.clone().unwrap();
        assert!(verify_coe(&cert, &kp.public_key, &proof, &ca.public_key()));
    }

    #[test]
    fn uncertified_signer() {
        let ca = manufacturer();
        let mut a = ca.provision(seed(1), 16).unwrap();
        let rogue = MeterIdentity::new(seed(9), 16).unwrap();
        assert_eq!(issue_certificate(a.tree.root(), &rogue), Err(CoeError::NotCertified));

        // Rogue meter self-certifies with its own CA key.
        let mut self_made = rogue.clone();
        let fake_ca = Manufacturer::new(keypair_from_label(b"fake-ca"));
        self_made.factory_cert = Some(fake_ca.certify(&self_made.factory_keypair.public_key));
        let cert = issue_certificate(a.tree.root(), &self_made).unwrap();
        a.install_certificate(cert.clone()).unwrap();
        let (kp, proof) = a.next_signing_key().unwrap();
        assert!(!verify_coe(&cert, &kp.public_key, &proof, &ca.public_key()));
    }

    #[test]
    fn attacker_key_not_in_tree() {
        let ca = manufacturer();
        let (mut a, _) = certified_pair(&ca);
        let (_, proof) = a.next_signing_key().unwrap();
        let cert = a.certificate.clone().unwrap();
        let attacker = keypair_from_label(b"attacker");
        assert!(!verify_coe(&cert, &attacker.public_key, &proof, &ca.public_key()));
    }

    #[test]
    fn root_resigned_by_uncertified_key_rejected() {
        let ca = manufacturer();
        let (mut a, _) = certified_pair(&ca);
        let (kp, proof) = a.next_signing_key().unwrap();
        let mut forged = a.certificate.clone().unwrap();
        let rogue = keypair_from_label(b"rogue");
        forged.signer_pk = rogue.public_key;
        forged.signer_sig = rogue.sign(&root_message(&forged.root));
        // Keep the genuine manufacturer cert of the real signer: it does not cover the rogue key.
        assert!(!verify_coe(&forged, &kp.public_key, &proof, &ca.public_key()));
    }

    #[test]
    fn ring_of_ten_meters() {
        let ca = manufacturer();
        let mut meters: Vec<MeterIdentity> = (0..10).map(|i| ca.provision(seed(i), 16).unwrap()).collect();
        for i in 0..10 {
            let signer = meters[(i + 1) % 10].clone();
            let cert = issue_certificate(meters[i].tree.root(), &signer).unwrap();
            meters[i].install_certificate(cert).unwrap();
        }
        for m in &mut meters {
            let (kp, proof) = m.next_signing_key().unwrap();
            assert!(verify_coe(m.certificate.as_ref().unwrap(), &kp.public_key, &proof, &ca.public_key()));
        }
    }

    #[test]
    fn keys_rotate_until_exhausted_then_rebuild() {
        let ca = manufacturer();
        let (mut a, b) = certified_pair(&ca);
        let old_root = a.tree.root();
        let mut pks = HashSet::new();
        for _ in 0..16 {
            let (kp, proof) = a.next_signing_key().unwrap();
            assert!(verify_coe(a.certificate.as_ref().unwrap(), &kp.public_key, &proof, &ca.public_key()));
            assert!(pks.insert(kp.public_key));
        }
        assert_eq!(a.next_signing_key().unwrap_err(), CoeError::ExhaustedKeys(16));

        let new_root = a.rebuild_tree().unwrap();
        assert_ne!(new_root, old_root);
        assert_eq!(a.next_signing_key().unwrap_err(), CoeError::NoCertificate);
        assert_eq!(
            a.install_certificate(issue_certificate(old_root, &b).unwrap()),
            Err(CoeError::RootMismatch)
        );
        a.install_certificate(issue_certificate(new_root, &b).unwrap()).unwrap();
        let (kp, proof) = a.next_signing_key().unwrap();
        assert!(!pks.contains(&kp.public_key));
        assert!(verify_coe(a.certificate.as_ref().unwrap(), &kp.public_key, &proof, &ca.public_key()));
    }

    #[test]
    fn width_must_be_power_of_two() {
        assert_eq!(MeterIdentity::new(seed(1), 12).unwrap_err(), CoeError::BadWidth(12));
    }

    #[test]
    fn bundle_layout() {
        let ca = manufacturer();
        let (mut a, _) = certified_pair(&ca);
        let (_, proof) = a.next_signing_key().unwrap();
        let cert = a.certificate.clone().unwrap();
        let bytes = encode_bundle(&cert, &proof);
        assert_eq!(bytes.len(), CoECertificate::ENCODED_LEN + 16 + 4 * 33);
        assert_eq!(&bytes[..32], &cert.root.0);
        assert_eq!(decode_bundle(&bytes).unwrap(), (cert, proof));
        assert!(decode_bundle(&bytes[..bytes.len() - 1]).is_err());
    }
}
