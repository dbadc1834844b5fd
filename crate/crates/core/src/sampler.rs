//! Target-conditioned generation and valence repair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::chemmetrics::{check_valence, ValenceTable};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::molio::{ContinuousGraph, MolGraph};
use crate::objectives::{sample_space, SpaceParams};

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub sequence: String,
    pub samples: usize,
    /// Space scale at generation time; 0 decodes `Z_T` itself.
    pub lambda: f64,
    pub seed: u64,
    pub correction: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedMolecule {
    /// Discretized decoder output before any repair.
    pub raw: MolGraph,
    pub raw_valid: bool,
    /// `raw` after correction, or `raw` itself when correction is off.
    pub graph: MolGraph,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub molecules: Vec<GeneratedMolecule>,
}

impl Generation {
    pub fn graphs(&self) -> Vec<MolGraph> {
        self.molecules.iter().map(|m| m.graph.clone()).collect()
    }

    /// Percentage of samples that were valid before correction.
    pub fn raw_validity(&self) -> f64 {
        if self.molecules.is_empty() {
            return 0.0;
        }
        let ok = self.molecules.iter().filter(|m| m.raw_valid).count();
        100.0 * ok as f64 / self.molecules.len() as f64
    }
}

/// A decode that leaves every slot padding keeps the single highest-scoring
/// (slot, type) entry, so every sample names at least one atom.
fn promote_if_empty(x: &ContinuousGraph, g: &mut MolGraph) {
    if g.n_heavy() > 0 {
        return;
    }
    let k = x.shape.k;
    let best = (0..x.atoms.len()).fold(0, |b, i| if x.atoms[i] > x.atoms[b] { i } else { b });
    g.set_atom(best / k, Some(best % k));
}

/// Sample `i` uses its own ChaCha stream, so outputs do not depend on how
/// samples are scheduled across threads.
pub fn generate(req: &GenerationRequest, model: &Model) -> Result<Generation> {
    if req.samples == 0 {
        return Err(Error::Range {
            name: "samples",
            value: 0.0,
            expected: ">= 1",
        });
    }
    if !model.is_initialized() {
        return Err(Error::Untrained(
            "actnorm layers are not initialized".into(),
        ));
    }
    let z_t = model.encoder.encode(&req.sequence)?.z;
    let space = SpaceParams::new(req.lambda, model.space_sigma.clone())?;
    let table = ValenceTable::from_vocab(&model.config.graph.vocab);
    let molecules = (0..req.samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
            rng.set_stream(i as u64);
            let z = sample_space(&z_t, &space, &mut rng);
            let (x, mut raw) = model.decode(&z)?;
            promote_if_empty(&x, &mut raw);
            let raw_valid = check_valence(&raw, &table);
            let graph = if req.correction {
                validity_correction(&raw, &table)
            } else {
                raw.clone()
            };
            Ok(GeneratedMolecule {
                raw,
                raw_valid,
                graph,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = Generation { molecules };
    log::info!(
        "generated {} samples, {:.2}% valid before correction",
        req.samples,
        out.raw_validity()
    );
    Ok(out)
}

/// The atom with the largest valence excess, lowest slot on ties.
fn worst_atom(g: &MolGraph, table: &ValenceTable) -> Option<usize> {
    g.occupied()
        .map(|i| (table.excess(g, i), i))
        .filter(|&(e, _)| e > 0)
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(_, i)| i)
}

/// Lowers bond orders until no atom exceeds its valence, then keeps the
/// largest connected component.
///
/// Each step takes the worst atom and weakens its highest-order bond by one
/// (a single bond is removed), choosing the lowest `(i, j)` among equal
/// orders. The component kept is the one with the most atoms, the one with
/// the lowest slot on ties. The result passes [`check_valence`] whenever the
/// input has an atom, and correcting it again changes nothing.
pub fn validity_correction(g: &MolGraph, table: &ValenceTable) -> MolGraph {
    let mut g = g.clone();
    while let Some(i) = worst_atom(&g, table) {
        let (j, ch) = g
            .neighbors(i)
            .max_by(|a, b| {
                a.1.cmp(&b.1)
                    .then((i.min(b.0), i.max(b.0)).cmp(&(i.min(a.0), i.max(a.0))))
            })
            .expect("an atom over its valence has a bond");
        g.set_bond(i, j, ch.checked_sub(1));
    }
    let comps = g.components();
    if comps.len() > 1 {
        let keep = comps
            .iter()
            .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
            .expect("several components");
        g.retain_slots(keep);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molio::{parse_smiles, GraphConfig};

    fn mol(s: &str) -> MolGraph {
        parse_smiles(s, &GraphConfig::default()).unwrap()
    }

    #[test]
    fn valid_graphs_are_fixed_points() {
        let t = ValenceTable::default();
        for s in ["C", "CCO", "O=C=O", "C1=CC=CC=C1", "C#N"] {
            assert_eq!(validity_correction(&mol(s), &t), mol(s));
        }
    }

    #[test]
    fn pentavalent_carbon_loses_its_first_bond() {
        let t = ValenceTable::default();
        // slot 1 is the carbon, bonded to slots 0 and 2..5
        let g = mol("FC(F)(F)(F)F");
        let out = validity_correction(&g, &t);
        assert_eq!(out.bond(0, 1), None);
        for j in 2..6 {
            assert_eq!(out.bond(1, j), Some(0));
        }
        // the detached fluorine is dropped as a separate component
        assert_eq!(out.atom(0), None);
        assert!(check_valence(&out, &t));
    }

    #[test]
    fn highest_order_bond_is_weakened_first() {
        let t = ValenceTable::default();
        // C=N=C: nitrogen carries 4; its lowest-index double bond drops to single
        let out = validity_correction(&mol("C=N=C"), &t);
        assert_eq!(out.bond(0, 1), Some(0));
        assert_eq!(out.bond(1, 2), Some(1));
        assert!(check_valence(&out, &t));
    }

    #[test]
    fn largest_component_is_kept() {
        let t = ValenceTable::default();
        let mut g = mol("CCCCC");
        g.set_bond(1, 2, None);
        assert!(!check_valence(&g, &t));
        let out = validity_correction(&g, &t);
        assert_eq!(out.occupied().collect::<Vec<_>>(), vec![2, 3, 4]);
        assert!(check_valence(&out, &t));

        let mut tie = mol("CCOC");
        tie.set_bond(1, 2, None);
        let out = validity_correction(&tie, &t);
        assert_eq!(out.occupied().collect::<Vec<_>>(), vec![0, 1]);
    }
}
