//! Moving between one-hot graphs and the real-valued tensors flows act on.

use rand::Rng;

use super::graph::{GraphShape, MolGraph};
use crate::error::{Error, Result};

pub const DEFAULT_NOISE_SCALE: f64 = 0.4;

/// Score at or above which an atom slot is occupied or a bond is present.
const PRESENCE_THRESHOLD: f64 = 0.5;

/// Real-valued counterpart of [`MolGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousGraph {
    pub shape: GraphShape,
    /// Row-major `N×K`.
    pub atoms: Vec<f64>,
    /// Channel-major `C×N×N`.
    pub bonds: Vec<f64>,
}

impl ContinuousGraph {
    pub fn new(shape: GraphShape, atoms: Vec<f64>, bonds: Vec<f64>) -> Result<Self> {
        if atoms.len() != shape.atom_dim() || bonds.len() != shape.bond_dim() {
            return Err(Error::Shape(format!(
                "continuous graph expects {}+{} entries, got {}+{}",
                shape.atom_dim(),
                shape.bond_dim(),
                atoms.len(),
                bonds.len()
            )));
        }
        if let Some(v) = atoms.iter().chain(&bonds).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("continuous graph entry {v}")));
        }
        Ok(Self {
            shape,
            atoms,
            bonds,
        })
    }
}

/// Adds independent `U[0, noise_scale)` noise to every one-hot entry.
pub fn dequantize<R: Rng + ?Sized>(
    g: &MolGraph,
    noise_scale: f64,
    rng: &mut R,
) -> Result<ContinuousGraph> {
    if !(noise_scale > 0.0 && noise_scale < 1.0) {
        return Err(Error::Range {
            name: "noise_scale",
            value: noise_scale,
            expected: "0 < noise_scale < 1",
        });
    }
    let mut atoms = g.atom_matrix();
    let mut bonds = g.bond_tensor();
    for v in atoms.iter_mut().chain(bonds.iter_mut()) {
        *v += noise_scale * rng.random::<f64>();
    }
    Ok(ContinuousGraph {
        shape: g.shape(),
        atoms,
        bonds,
    })
}

/// Index and value of the first maximum.
fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
}

/// Rounds continuous tensors back to a graph.
///
/// An atom slot is padding when its best type score is below 0.5; a bond
/// pair uses the average of `x[c,i,j]` and `x[c,j,i]` and is absent when the
/// best channel average is below 0.5. Ties at exactly 0.5 count as present,
/// and ties between types go to the lowest index. Bonds that would touch a
/// padding slot are dropped.
pub fn discretize(x: &ContinuousGraph) -> MolGraph {
    let GraphShape { n, k, c } = x.shape;
    let mut g = MolGraph::empty(x.shape);
    for i in 0..n {
        let (best, score) = argmax(x.atoms[i * k..(i + 1) * k].iter().copied());
        if score >= PRESENCE_THRESHOLD {
            g.set_atom(i, Some(best));
        }
    }
    for i in 0..n {
        if g.atom(i).is_none() {
            continue;
        }
        for j in i + 1..n {
            if g.atom(j).is_none() {
                continue;
            }
            if let Some(best) = bond_choice(&x.bonds, c, n, i, j) {
                g.set_bond(i, j, Some(best));
            }
        }
    }
    g
}

fn bond_choice(bonds: &[f64], c: usize, n: usize, i: usize, j: usize) -> Option<usize> {
    let (best, score) = argmax(
        (0..c).map(|ch| 0.5 * (bonds[ch * n * n + i * n + j] + bonds[ch * n * n + j * n + i])),
    );
    (score >= PRESENCE_THRESHOLD).then_some(best)
}

/// One-hot bond tensor decided by the same rule as [`discretize`] but without
/// atom information, so no pair is dropped for touching padding. The
/// generator conditions the atom flow on this tensor.
pub fn discretize_bonds(shape: GraphShape, bonds: &[f64]) -> Result<Vec<f64>> {
    let GraphShape { n, c, .. } = shape;
    if bonds.len() != shape.bond_dim() {
        return Err(Error::Shape(format!(
            "bond tensor expects {} entries, got {}",
            shape.bond_dim(),
            bonds.len()
        )));
    }
    let mut out = vec![0.0; bonds.len()];
    for i in 0..n {
        for j in i + 1..n {
            if let Some(ch) = bond_choice(bonds, c, n, i, j) {
                out[ch * n * n + i * n + j] = 1.0;
                out[ch * n * n + j * n + i] = 1.0;
            }
        }
    }
    Ok(out)
}
