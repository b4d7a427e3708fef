//! Binary Merkle tree over byte-string leaves.
//!
//! Leaf nodes are `H(0x00 ‖ leaf_digest)` and interior nodes
//! `H(0x01 ‖ left ‖ right)`, where `leaf_digest` is `H(leaf)` or, for hiding
//! commitments, `H(salt ‖ leaf)` with a 16-byte salt. A level with an odd
//! number of nodes carries its last node up unchanged.

use rand::{CryptoRng, RngCore};

use super::{hash, hash_parts, CryptoError, Digest};

const LEAF_PREFIX: u8 = 0x00;
const NODE_PREFIX: u8 = 0x01;

pub type Salt = [u8; 16];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleTree {
    salts: Option<Vec<Salt>>,
    /// `levels[0]` holds the leaf nodes, the last level holds the root.
    levels: Vec<Vec<Digest>>,
}

/// Inclusion proof: sibling digests from the leaf level upwards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleProof {
    pub index: u32,
    pub leaf_count: u32,
    pub siblings: Vec<Digest>,
}

fn leaf_digest(leaf: &[u8], salt: Option<&Salt>) -> Digest {
    match salt {
        Some(s) => hash_parts(&[s, leaf]),
        None => hash(leaf),
    }
}

fn leaf_node(leaf: &[u8], salt: Option<&Salt>) -> Digest {
    hash_parts(&[&[LEAF_PREFIX], leaf_digest(leaf, salt).as_bytes()])
}

fn interior(left: &Digest, right: &Digest) -> Digest {
    hash_parts(&[&[NODE_PREFIX], left.as_bytes(), right.as_bytes()])
}

/// Commits to `leaves`. With `hiding`, every leaf gets a fresh salt from `rng`.
pub fn merkle_commit<L, R>(
    leaves: &[L],
    hiding: bool,
    rng: &mut R,
) -> Result<(MerkleTree, Digest), CryptoError>
where
    L: AsRef<[u8]>,
    R: RngCore + CryptoRng,
{
    let salts = hiding.then(|| {
        (0..leaves.len())
            .map(|_| {
                let mut s = [0u8; 16];
                rng.fill_bytes(&mut s);
                s
            })
            .collect::<Vec<_>>()
    });
    let tree = MerkleTree::build(leaves, salts)?;
    let root = tree.root();
    Ok((tree, root))
}

/// Checks that `leaf` (with its salt, for hiding trees) sits at `index` under `root`.
pub fn merkle_verify(
    root: &Digest,
    index: usize,
    leaf: &[u8],
    salt: Option<&Salt>,
    proof: &MerkleProof,
) -> bool {
    if proof.index as usize != index || index >= proof.leaf_count as usize {
        return false;
    }
    let mut node = leaf_node(leaf, salt);
    let mut pos = index;
    let mut width = proof.leaf_count as usize;
    let mut siblings = proof.siblings.iter();
    while width > 1 {
        let carried = pos == width - 1 && width % 2 == 1;
        if !carried {
            let Some(sib) = siblings.next() else {
                return false;
            };
            node = if pos % 2 == 0 {
                interior(&node, sib)
            } else {
                interior(sib, &node)
            };
        }
        pos /= 2;
        width = width.div_ceil(2);
    }
    siblings.next().is_none() && node == *root
}

impl MerkleTree {
    /// Builds a tree from explicit salts (one per leaf) or none.
    pub fn build<L: AsRef<[u8]>>(leaves: &[L], salts: Option<Vec<Salt>>) -> Result<Self, CryptoError> {
        if leaves.is_empty() {
            return Err(CryptoError::EmptyLeafSet);
        }
        if let Some(s) = &salts {
            if s.len() != leaves.len() {
                return Err(CryptoError::decode(
                    "salts",
                    format!("{} salts for {} leaves", s.len(), leaves.len()),
                ));
            }
        }
        let base: Vec<Digest> = leaves
            .iter()
            .enumerate()
            .map(|(i, l)| leaf_node(l.as_ref(), salts.as_ref().map(|s| &s[i])))
            .collect();
        let mut levels = vec![base];
        while levels.last().unwrap().len() > 1 {
            let prev = levels.last().unwrap();
            let next = prev
                .chunks(2)
                .map(|pair| match pair {
                    [l, r] => interior(l, r),
                    [single] => *single,
                    _ => unreachable!(),
                })
                .collect();
            levels.push(next);
        }
        Ok(MerkleTree { salts, levels })
    }

    pub fn root(&self) -> Digest {
        self.levels.last().unwrap()[0]
    }

    pub fn leaf_count(&self) -> usize {
        self.levels[0].len()
    }

    pub fn is_hiding(&self) -> bool {
        self.salts.is_some()
    }

    pub fn salt(&self, index: usize) -> Option<&Salt> {
        self.salts.as_ref().and_then(|s| s.get(index))
    }

    pub fn salts(&self) -> Option<&[Salt]> {
        self.salts.as_deref()
    }

    pub fn prove(&self, index: usize) -> Result<MerkleProof, CryptoError> {
        let len = self.leaf_count();
        if index >= len {
            return Err(CryptoError::IndexOutOfRange { index, len });
        }
        let mut siblings = Vec::new();
        let mut pos = index;
        for level in &self.levels[..self.levels.len() - 1] {
            let width = level.len();
            let carried = pos == width - 1 && width % 2 == 1;
            if !carried {
                siblings.push(level[pos ^ 1]);
            }
            pos /= 2;
        }
        Ok(MerkleProof {
            index: index as u32,
            leaf_count: len as u32,
            siblings,
        })
    }

    /// Replaces one leaf and recomputes its path. Returns the number of
    /// interior digests recomputed.
    pub fn update_leaf(&mut self, index: usize, leaf: &[u8]) -> Result<usize, CryptoError> {
        let len = self.leaf_count();
        if index >= len {
            return Err(CryptoError::IndexOutOfRange { index, len });
        }
        let salt = self.salt(index).copied();
        self.levels[0][index] = leaf_node(leaf, salt.as_ref());
        let mut recomputed = 0;
        let mut pos = index;
        for lvl in 1..self.levels.len() {
            let parent = pos / 2;
            let below = &self.levels[lvl - 1];
            let value = match below.get(2 * parent + 1) {
                Some(r) => {
                    recomputed += 1;
                    interior(&below[2 * parent], r)
                }
                None => below[2 * parent],
            };
            self.levels[lvl][parent] = value;
            pos = parent;
        }
        Ok(recomputed)
    }
}

impl MerkleProof {
    /// `index(4) ‖ leaf_count(4) ‖ count(2) ‖ siblings`, big-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 32 * self.siblings.len());
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(&self.leaf_count.to_be_bytes());
        out.extend_from_slice(&(self.siblings.len() as u16).to_be_bytes());
        for s in &self.siblings {
            out.extend_from_slice(s.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < 10 {
            return Err(CryptoError::decode("merkle proof", "truncated header"));
        }
        let index = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
        let leaf_count = u32::from_be_bytes(bytes[4..8].try_into().unwrap());
        let count = u16::from_be_bytes(bytes[8..10].try_into().unwrap()) as usize;
        let body = &bytes[10..];
        if body.len() != 32 * count {
            return Err(CryptoError::decode(
                "merkle proof",
                format!("expected {} sibling bytes, got {}", 32 * count, body.len()),
            ));
        }
        let siblings = body
            .chunks_exact(32)
            .map(|c| Digest::from_slice(c))
            .collect::<Result<_, _>>()?;
        Ok(MerkleProof {
            index,
            leaf_count,
            siblings,
        })
    }
}
