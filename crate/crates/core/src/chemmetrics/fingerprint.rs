use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::hash_words;
use crate::molio::MolGraph;

pub const DEFAULT_RADIUS: usize = 2;
pub const DEFAULT_WIDTH: usize = 2048;

/// Folded circular fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub width: usize,
    pub radius: usize,
    words: Vec<u64>,
}

impl Fingerprint {
    pub fn empty(width: usize, radius: usize) -> Self {
        Self {
            width,
            radius,
            words: vec![0; width.div_ceil(64)],
        }
    }

    pub fn from_bits(width: usize, radius: usize, bits: impl IntoIterator<Item = usize>) -> Self {
        let mut fp = Self::empty(width, radius);
        for b in bits {
            fp.set(b);
        }
        fp
    }

    pub fn set(&mut self, bit: usize) {
        assert!(bit < self.width, "bit {bit} outside width {}", self.width);
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn bits(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.width).filter(|&b| self.get(b))
    }
}

/// ECFP-style fingerprint. Round 0 identifiers hash (type, degree, bond-order
/// sum); round `r` rehashes each identifier with its sorted
/// (bond order, neighbor identifier) pairs. Every identifier of every round
/// sets bit `id mod width`.
pub fn circular_fingerprint(g: &MolGraph, radius: usize, width: usize) -> Fingerprint {
    assert!(width > 0, "fingerprint width must be positive");
    let mut fp = Fingerprint::empty(width, radius);
    let atoms: Vec<usize> = g.occupied().collect();
    let mut ids = vec![0u64; g.n_slots()];
    for &i in &atoms {
        ids[i] = hash_words([
            g.atom(i).unwrap() as u64,
            g.degree(i) as u64,
            g.valence_sum(i) as u64,
        ]);
        fp.set((ids[i] % width as u64) as usize);
    }
    for r in 1..=radius {
        let mut next = ids.clone();
        for &i in &atoms {
            let mut env: Vec<(u64, u64)> = g
                .neighbors(i)
                .map(|(j, c)| (c as u64 + 1, ids[j]))
                .collect();
            env.sort_unstable();
            next[i] = hash_words(
                [r as u64, ids[i]]
                    .into_iter()
                    .chain(env.into_iter().flat_map(|(o, id)| [o, id])),
            );
            fp.set((next[i] % width as u64) as usize);
        }
        ids = next;
    }
    fp
}

/// `|a ∧ b| / |a ∨ b|`, and 1 when both are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    if a.width != b.width {
        return Err(Error::WidthMismatch {
            left: a.width,
            right: b.width,
        });
    }
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}
