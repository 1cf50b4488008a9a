//! Binary Merkle trees over 32-byte hashes.
//!
//! Internal nodes are `digest(left ‖ right)`. A level with an odd number of
//! nodes (other than the root level) is padded by duplicating its last node.
//! A one-leaf tree has root `digest(leaf)` and an empty proof, so a root is
//! never equal to a bare leaf hash.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::{digest, digest_parts, Hash};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MerkleError {
    #[error("cannot build a Merkle tree with no leaves")]
    Empty,
    #[error("leaf index {index} out of range for {leaves} leaves")]
    IndexOutOfRange { index: usize, leaves: usize },
}

/// Which side of the running hash a sibling sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleTree {
    levels: Vec<Vec<Hash>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub leaf_index: usize,
    pub siblings: Vec<(Hash, Side)>,
}

pub fn hash_pair(left: &Hash, right: &Hash) -> Hash {
    digest_parts(&[&left.0, &right.0])
}

impl MerkleTree {
    pub fn from_leaves(leaves: Vec<Hash>) -> Result<Self, MerkleError> {
        if leaves.is_empty() {
            return Err(MerkleError::Empty);
        }
        let mut levels = vec![leaves];
        if levels[0].len() == 1 {
            let lifted = digest(&levels[0][0].0);
            levels.push(vec![lifted]);
            return Ok(Self { levels });
        }
        while levels.last().map_or(0, Vec::len) > 1 {
            let mut cur = levels.last().cloned().unwrap_or_default();
            if cur.len() % 2 == 1 {
                let last = *cur.last().expect("non-empty level");
                cur.push(last);
            }
            let next = cur.chunks(2).map(|p| hash_pair(&p[0], &p[1])).collect();
            levels.push(next);
        }
        Ok(Self { levels })
    }

    pub fn root(&self) -> Hash {
        self.levels.last().expect("at least one level")[0]
    }

    pub fn leaves(&self) -> &[Hash] {
        &self.levels[0]
    }

    pub fn levels(&self) -> &[Vec<Hash>] {
        &self.levels
    }

    pub fn leaf_count(&self) -> usize {
        self.levels[0].len()
    }

    /// Number of sibling steps in a proof.
    pub fn depth(&self) -> usize {
        if self.leaf_count() == 1 {
            0
        } else {
            self.levels.len() - 1
        }
    }

    pub fn proof(&self, leaf_index: usize) -> Result<MerkleProof, MerkleError> {
        if leaf_index >= self.leaf_count() {
            return Err(MerkleError::IndexOutOfRange {
                index: leaf_index,
                leaves: self.leaf_count(),
            });
        }
        let mut siblings = Vec::with_capacity(self.depth());
        let mut idx = leaf_index;
        for level in &self.levels[..self.depth()] {
            let (sib_idx, side) = if idx.is_multiple_of(2) {
                (idx + 1, Side::Right)
            } else {
                (idx - 1, Side::Left)
            };
            // Odd level: the last node pairs with its own copy.
            let sib = level.get(sib_idx).copied().unwrap_or(level[idx]);
            siblings.push((sib, side));
            idx /= 2;
        }
        Ok(MerkleProof {
            leaf_index,
            siblings,
        })
    }
}

impl MerkleProof {
    pub fn compute_root(&self, leaf: &Hash) -> Hash {
        if self.siblings.is_empty() {
            return digest(&leaf.0);
        }
        self.siblings.iter().fold(*leaf, |acc, (sib, side)| match side {
            Side::Left => hash_pair(sib, &acc),
            Side::Right => hash_pair(&acc, sib),
        })
    }

    pub fn verify(&self, leaf: &Hash, root: &Hash) -> bool {
        // Side flags must agree with the claimed index, otherwise one proof
        // could be replayed under many indices.
        let mut idx = self.leaf_index;
        for (_, side) in &self.siblings {
            let expected = if idx.is_multiple_of(2) { Side::Right } else { Side::Left };
            if *side != expected {
                return false;
            }
            idx /= 2;
        }
        idx == 0 && self.compute_root(leaf) == *root
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u64(self.leaf_index as u64).u64(self.siblings.len() as u64);
        for (h, side) in &self.siblings {
            w.u8(match side {
                Side::Left => 0,
                Side::Right => 1,
            });
            w.fixed(&h.0);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let leaf_index = r.u64()? as usize;
        let n = r.u64()?;
        let mut siblings = Vec::new();
        for _ in 0..n {
            let at = r.position();
            let side = match r.u8()? {
                0 => Side::Left,
                1 => Side::Right,
                tag => return Err(DecodeError::BadTag { tag, offset: at }),
            };
            siblings.push((Hash(r.fixed::<32>()?), side));
        }
        Ok(Self {
            leaf_index,
            siblings,
        })
    }
}

/// Root over an ordered hash list; the empty list maps to `digest([])`.
pub fn merkle_root(items: &[Hash]) -> Hash {
    match MerkleTree::from_leaves(items.to_vec()) {
        Ok(tree) => tree.root(),
        Err(MerkleError::Empty) => digest(&[]),
        Err(e) => unreachable!("{e}"),
    }
}
