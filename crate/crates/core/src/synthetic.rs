//! Deterministic desk-scale drug-target dataset.
//!
//! Targets are random 60-residue sequences; each gets four distinct random
//! molecules drawn by rejection against the valence check.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chemmetrics::{canonical_hash, check_valence, ValenceTable};
use crate::error::{Error, Result};
use crate::molio::{write_smiles, Element, GraphConfig, MolGraph};
use crate::targetenc::AMINO_ACIDS;

pub const SEQUENCE_LEN: usize = 60;
pub const DRUGS_PER_TARGET: usize = 4;
pub const MAX_SYNTHETIC_ATOMS: usize = 9;
const MIN_ATOMS: usize = 3;
const MAX_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub target_id: String,
    pub sequence: String,
    pub smiles: String,
}

fn element_weight(e: Element) -> u32 {
    match e {
        Element::C => 8,
        Element::N | Element::O => 3,
        _ => 1,
    }
}

fn pick_element<R: Rng + ?Sized>(weights: &[u32], rng: &mut R) -> usize {
    let mut r = rng.random_range(0..weights.iter().sum::<u32>());
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            return i;
        }
        r -= w;
    }
    unreachable!("weights cover the range")
}

fn pick_channel<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> usize {
    let r: f64 = rng.random();
    let ch = if r < 0.75 {
        0
    } else if r < 0.95 {
        1
    } else {
        2
    };
    ch.min(channels - 1)
}

/// One connected candidate: a random tree plus up to two ring closures.
fn candidate<R: Rng + ?Sized>(cfg: &GraphConfig, weights: &[u32], rng: &mut R) -> MolGraph {
    let max = cfg.max_atoms.min(MAX_SYNTHETIC_ATOMS);
    let n = rng.random_range(MIN_ATOMS.min(max)..=max);
    let mut g = MolGraph::empty(cfg.shape());
    for i in 0..n {
        g.set_atom(i, Some(pick_element(weights, rng)));
    }
    for i in 1..n {
        let j = rng.random_range(0..i);
        g.set_bond(i, j, Some(pick_channel(cfg.bond_channels, rng)));
    }
    for _ in 0..rng.random_range(0..=2) {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        if i != j && g.bond(i, j).is_none() {
            g.set_bond(i, j, Some(0));
        }
    }
    g
}

/// `pairs` records over `ceil(pairs / 4)` targets. Molecules are distinct
/// across the whole set.
pub fn make_synthetic(pairs: usize, seed: u64, cfg: &GraphConfig) -> Result<Vec<SyntheticPair>> {
    if pairs == 0 {
        return Err(Error::Range {
            name: "pairs",
            value: 0.0,
            expected: ">= 1",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = ValenceTable::from_vocab(&cfg.vocab);
    let weights: Vec<u32> = cfg
        .vocab
        .elements()
        .iter()
        .map(|&e| element_weight(e))
        .collect();
    let mut seen_mols = HashSet::new();
    let mut seen_seqs = HashSet::new();
    let mut out = Vec::with_capacity(pairs);
    let mut t = 0;
    while out.len() < pairs {
        let sequence = loop {
            let s: String = (0..SEQUENCE_LEN)
                .map(|_| AMINO_ACIDS[rng.random_range(0..AMINO_ACIDS.len())] as char)
                .collect();
            if seen_seqs.insert(s.clone()) {
                break s;
            }
        };
        let target_id = format!("T{t:03}");
        for _ in 0..DRUGS_PER_TARGET.min(pairs - out.len()) {
            let mut attempts = 0;
            let g = loop {
                attempts += 1;
                if attempts > MAX_ATTEMPTS {
                    return Err(Error::Config(
                        "could not draw enough distinct valid molecules".into(),
                    ));
                }
                let g = candidate(cfg, &weights, &mut rng);
                if check_valence(&g, &table) && seen_mols.insert(canonical_hash(&g)) {
                    break g;
                }
            };
            out.push(SyntheticPair {
                target_id: target_id.clone(),
                sequence: sequence.clone(),
                smiles: write_smiles(&g, cfg)?,
            });
        }
        t += 1;
    }
    Ok(out)
}

/// Dataset file text: `target_id<TAB>sequence<TAB>smiles` per line.
pub fn to_tsv(pairs: &[SyntheticPair]) -> String {
    let mut s = String::new();
    for p in pairs {
        writeln!(s, "{}\t{}\t{}", p.target_id, p.sequence, p.smiles).unwrap();
    }
    s
}
