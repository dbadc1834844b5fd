//! Molecule ingestion: SMILES, pair datasets and the discrete/continuous
//! graph tensors the flows consume.

mod dataset;
mod dequant;
mod graph;
mod smiles;

pub use dataset::{load_pairs, parse_pairs, PairDataset, PairRecord, Split};
pub use dequant::{dequantize, discretize, discretize_bonds, ContinuousGraph, DEFAULT_NOISE_SCALE};
pub use graph::{Element, GraphShape, MolGraph, Vocab};
pub use smiles::{parse_smiles, write_smiles};

/// Vocabulary plus tensor limits; everything needed to map SMILES to tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphConfig {
    pub vocab: Vocab,
    pub max_atoms: usize,
    pub bond_channels: usize,
}

impl GraphConfig {
    pub fn new(vocab: Vocab, max_atoms: usize, bond_channels: usize) -> Self {
        Self {
            vocab,
            max_atoms,
            bond_channels,
        }
    }

    pub fn shape(&self) -> GraphShape {
        GraphShape::new(self.max_atoms, self.vocab.len(), self.bond_channels)
    }
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self::new(Vocab::default(), 9, 3)
    }
}
