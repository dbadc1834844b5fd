//! Discrete molecular graphs over a fixed number of atom slots.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Heavy-atom element supported by the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    B,
    C,
    N,
    O,
    F,
    Si,
    P,
    S,
    Cl,
    Br,
    I,
}

impl Element {
    pub const ALL: [Element; 11] = [
        Element::B,
        Element::C,
        Element::N,
        Element::O,
        Element::F,
        Element::Si,
        Element::P,
        Element::S,
        Element::Cl,
        Element::Br,
        Element::I,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
            Element::Si => "Si",
            Element::P => "P",
            Element::S => "S",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
        }
    }

    pub fn atomic_number(self) -> u8 {
        match self {
            Element::B => 5,
            Element::C => 6,
            Element::N => 7,
            Element::O => 8,
            Element::F => 9,
            Element::Si => 14,
            Element::P => 15,
            Element::S => 16,
            Element::Cl => 17,
            Element::Br => 35,
            Element::I => 53,
        }
    }

    /// Maximum total bond order used by the validity check.
    pub fn max_valence(self) -> u8 {
        match self {
            Element::C | Element::Si => 4,
            Element::N | Element::B => 3,
            Element::O => 2,
            Element::F | Element::Cl | Element::Br | Element::I => 1,
            Element::P => 5,
            Element::S => 6,
        }
    }

    /// Whether SMILES may write the element without brackets.
    pub fn is_organic_subset(self) -> bool {
        !matches!(self, Element::Si)
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Element {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Element::ALL
            .iter()
            .copied()
            .find(|e| e.symbol() == s)
            .ok_or_else(|| Error::Vocab {
                symbol: s.to_string(),
            })
    }
}

/// Ordered atom vocabulary; the position of an element is its one-hot column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    elements: Vec<Element>,
}

impl Vocab {
    pub fn new(elements: Vec<Element>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::Config("atom vocabulary is empty".into()));
        }
        for (i, e) in elements.iter().enumerate() {
            if elements[..i].contains(e) {
                return Err(Error::Config(format!(
                    "duplicate element {e} in vocabulary"
                )));
            }
        }
        Ok(Self { elements })
    }

    /// Parses a comma-separated symbol list such as `C,N,O`.
    pub fn parse(list: &str) -> Result<Self> {
        let elements = list
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<Vec<Element>>>()?;
        Self::new(elements)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn index_of(&self, e: Element) -> Option<usize> {
        self.elements.iter().position(|&x| x == e)
    }

    pub fn element(&self, idx: usize) -> Element {
        self.elements[idx]
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn to_list_string(&self) -> String {
        self.elements
            .iter()
            .map(|e| e.symbol())
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl Default for Vocab {
    fn default() -> Self {
        use Element::*;
        Self {
            elements: vec![C, N, O, F, P, S, Cl, Br, I, B, Si],
        }
    }
}

/// Tensor dimensions of the graph representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GraphShape {
    /// Atom slots.
    pub n: usize,
    /// Atom types.
    pub k: usize,
    /// Bond channels.
    pub c: usize,
}

impl GraphShape {
    pub fn new(n: usize, k: usize, c: usize) -> Self {
        Self { n, k, c }
    }

    pub fn atom_dim(&self) -> usize {
        self.n * self.k
    }

    pub fn bond_dim(&self) -> usize {
        self.c * self.n * self.n
    }

    /// Length of the concatenated latent `[atoms, bonds]`.
    pub fn latent_dim(&self) -> usize {
        self.atom_dim() + self.bond_dim()
    }
}

/// A molecular graph over `n` atom slots.
///
/// Slot `i` is either padding (`None`) or holds a vocabulary index. Bonds are
/// stored as a symmetric matrix of channel codes: `0` for no bond and
/// `c + 1` for bond channel `c` (bond order `c + 1`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MolGraph {
    n_channels: usize,
    n_types: usize,
    atoms: Vec<Option<u8>>,
    bonds: Vec<u8>,
}

impl MolGraph {
    /// All-padding graph.
    pub fn empty(shape: GraphShape) -> Self {
        assert!(shape.c < u8::MAX as usize && shape.k <= u8::MAX as usize);
        Self {
            n_channels: shape.c,
            n_types: shape.k,
            atoms: vec![None; shape.n],
            bonds: vec![0; shape.n * shape.n],
        }
    }

    pub fn shape(&self) -> GraphShape {
        GraphShape::new(self.atoms.len(), self.n_types, self.n_channels)
    }

    pub fn n_slots(&self) -> usize {
        self.atoms.len()
    }

    /// Count of occupied atom slots.
    pub fn n_heavy(&self) -> usize {
        self.atoms.iter().filter(|a| a.is_some()).count()
    }

    pub fn atom(&self, i: usize) -> Option<usize> {
        self.atoms[i].map(usize::from)
    }

    pub fn occupied(&self) -> impl Iterator<Item = usize> + '_ {
        self.atoms
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|_| i))
    }

    pub fn set_atom(&mut self, i: usize, kind: Option<usize>) {
        if let Some(k) = kind {
            assert!(k < self.n_types, "atom type {k} out of range");
            self.atoms[i] = Some(k as u8);
        } else {
            self.atoms[i] = None;
            for j in 0..self.n_slots() {
                self.set_bond(i, j, None);
            }
        }
    }

    /// Bond channel between `i` and `j`, if any.
    pub fn bond(&self, i: usize, j: usize) -> Option<usize> {
        match self.bonds[i * self.n_slots() + j] {
            0 => None,
            code => Some(code as usize - 1),
        }
    }

    /// Bond order between `i` and `j` (0 when unbonded).
    pub fn bond_order(&self, i: usize, j: usize) -> u32 {
        self.bonds[i * self.n_slots() + j] as u32
    }

    /// Sets or clears a bond. Self-bonds and bonds touching padding are
    /// rejected by panicking, since they break the graph invariants.
    pub fn set_bond(&mut self, i: usize, j: usize, channel: Option<usize>) {
        let n = self.n_slots();
        let code = match channel {
            None => 0,
            Some(c) => {
                assert!(c < self.n_channels, "bond channel {c} out of range");
                assert!(i != j, "self bond at slot {i}");
                assert!(
                    self.atoms[i].is_some() && self.atoms[j].is_some(),
                    "bond touches a padding slot"
                );
                c as u8 + 1
            }
        };
        self.bonds[i * n + j] = code;
        self.bonds[j * n + i] = code;
    }

    /// Neighbors of `i` with their bond channel.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n_slots();
        self.bonds[i * n..(i + 1) * n]
            .iter()
            .enumerate()
            .filter(|(_, &code)| code != 0)
            .map(|(j, &code)| (j, code as usize - 1))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    /// Sum of bond orders at `i`.
    pub fn valence_sum(&self, i: usize) -> u32 {
        self.neighbors(i).map(|(_, c)| c as u32 + 1).sum()
    }

    /// Bonds as `(i, j, channel)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize, usize)> {
        let n = self.n_slots();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if let Some(c) = self.bond(i, j) {
                    out.push((i, j, c));
                }
            }
        }
        out
    }

    /// Connected components of the occupied slots, each sorted, ordered by
    /// their smallest slot.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.n_slots();
        let mut seen = vec![false; n];
        let mut comps = Vec::new();
        for start in self.occupied() {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let mut comp = Vec::new();
            while let Some(u) = stack.pop() {
                comp.push(u);
                for (v, _) in self.neighbors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() == 1
    }

    /// Keeps only the given slots (renumbering nothing).
    pub fn retain_slots(&mut self, keep: &[usize]) {
        for i in 0..self.n_slots() {
            if !keep.contains(&i) && self.atoms[i].is_some() {
                self.set_atom(i, None);
            }
        }
    }

    /// Moves occupied slots to the front, preserving their order.
    pub fn compacted(&self) -> MolGraph {
        let order: Vec<usize> = self.occupied().collect();
        let mut out = MolGraph::empty(self.shape());
        for (new, &old) in order.iter().enumerate() {
            out.atoms[new] = self.atoms[old];
        }
        for (a, &oi) in order.iter().enumerate() {
            for (b, &oj) in order.iter().enumerate() {
                out.bonds[a * self.n_slots() + b] = self.bonds[oi * self.n_slots() + oj];
            }
        }
        out
    }

    /// Relabels slots: slot `i` of the result holds slot `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        let n = self.n_slots();
        assert_eq!(perm.len(), n);
        let mut out = MolGraph::empty(self.shape());
        for i in 0..n {
            out.atoms[i] = self.atoms[perm[i]];
            for j in 0..n {
                out.bonds[i * n + j] = self.bonds[perm[i] * n + perm[j]];
            }
        }
        out
    }

    /// Row-major `N×K` one-hot atom matrix.
    pub fn atom_matrix(&self) -> Vec<f64> {
        let k = self.n_types;
        let mut out = vec![0.0; self.n_slots() * k];
        for (i, a) in self.atoms.iter().enumerate() {
            if let Some(t) = a {
                out[i * k + *t as usize] = 1.0;
            }
        }
        out
    }

    /// `C×N×N` one-hot bond tensor, channel-major.
    pub fn bond_tensor(&self) -> Vec<f64> {
        let n = self.n_slots();
        let mut out = vec![0.0; self.n_channels * n * n];
        for (idx, &code) in self.bonds.iter().enumerate() {
            if code != 0 {
                out[(code as usize - 1) * n * n + idx] = 1.0;
            }
        }
        out
    }

    /// Rebuilds a graph from one-hot tensors, validating every invariant.
    pub fn from_one_hot(shape: GraphShape, atoms: &[f64], bonds: &[f64]) -> Result<Self> {
        let GraphShape { n, k, c } = shape;
        if atoms.len() != n * k || bonds.len() != c * n * n {
            return Err(Error::Shape(format!(
                "expected {}+{} entries, got {}+{}",
                n * k,
                c * n * n,
                atoms.len(),
                bonds.len()
            )));
        }
        let mut g = MolGraph::empty(shape);
        for i in 0..n {
            let row = &atoms[i * k..(i + 1) * k];
            let ones: Vec<usize> = (0..k).filter(|&t| row[t] == 1.0).collect();
            if row.iter().any(|&v| v != 0.0 && v != 1.0) || ones.len() > 1 {
                return Err(Error::Shape(format!("atom row {i} is not one-hot")));
            }
            g.atoms[i] = ones.first().map(|&t| t as u8);
        }
        for i in 0..n {
            for j in 0..n {
                let set: Vec<usize> = (0..c)
                    .filter(|&ch| bonds[ch * n * n + i * n + j] == 1.0)
                    .collect();
                if set.len() > 1 {
                    return Err(Error::Shape(format!("bond ({i},{j}) has several channels")));
                }
                for ch in 0..c {
                    let v = bonds[ch * n * n + i * n + j];
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::Shape(format!("bond ({i},{j}) is not one-hot")));
                    }
                    if v != bonds[ch * n * n + j * n + i] {
                        return Err(Error::Shape(format!("bond ({i},{j}) is asymmetric")));
                    }
                }
                if let Some(&ch) = set.first() {
                    if i == j {
                        return Err(Error::Shape(format!("self bond at slot {i}")));
                    }
                    if g.atoms[i].is_none() || g.atoms[j].is_none() {
                        return Err(Error::Shape(format!("bond ({i},{j}) touches padding")));
                    }
                    g.bonds[i * n + j] = ch as u8 + 1;
                }
            }
        }
        Ok(g)
    }

    /// Checks the structural invariants. Always true for graphs built through
    /// the public API; exposed for property tests.
    pub fn check_invariants(&self) -> bool {
        let n = self.n_slots();
        (0..n).all(|i| {
            self.bonds[i * n + i] == 0
                && (0..n).all(|j| {
                    let code = self.bonds[i * n + j];
                    code == self.bonds[j * n + i]
                        && (code == 0 || (self.atoms[i].is_some() && self.atoms[j].is_some()))
                        && (code as usize) <= self.n_channels
                })
        })
    }

    /// Element symbols of occupied slots, for display.
    pub fn describe(&self, vocab: &Vocab) -> String {
        self.occupied()
            .map(|i| vocab.element(self.atom(i).unwrap()).symbol())
            .collect::<Vec<_>>()
            .join("")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn propane() -> MolGraph {
        let mut g = MolGraph::empty(GraphShape::new(4, 3, 3));
        for i in 0..3 {
            g.set_atom(i, Some(0));
        }
        g.set_bond(0, 1, Some(0));
        g.set_bond(1, 2, Some(0));
        g
    }

    #[test]
    fn one_hot_round_trip() {
        let g = propane();
        let back = MolGraph::from_one_hot(g.shape(), &g.atom_matrix(), &g.bond_tensor()).unwrap();
        assert_eq!(back, g);
        assert_eq!(g.n_heavy(), 3);
    }

    #[test]
    fn from_one_hot_rejects_padding_bond() {
        let g = propane();
        let mut bonds = g.bond_tensor();
        let n = 4;
        bonds[2 * n + 3] = 1.0;
        bonds[3 * n + 2] = 1.0;
        assert!(matches!(
            MolGraph::from_one_hot(g.shape(), &g.atom_matrix(), &bonds),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn clearing_atom_clears_bonds() {
        let mut g = propane();
        g.set_atom(1, None);
        assert_eq!(g.edges(), vec![]);
        assert_eq!(g.components().len(), 2);
        assert!(g.check_invariants());
    }

    #[test]
    fn compacted_moves_atoms_forward() {
        let mut g = MolGraph::empty(GraphShape::new(4, 3, 3));
        g.set_atom(1, Some(1));
        g.set_atom(3, Some(2));
        g.set_bond(1, 3, Some(1));
        let c = g.compacted();
        assert_eq!(c.atom(0), Some(1));
        assert_eq!(c.atom(1), Some(2));
        assert_eq!(c.bond(0, 1), Some(1));
    }

    #[test]
    fn vocab_parse() {
        let v = Vocab::parse("C, N,Cl").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.index_of(Element::Cl), Some(2));
        assert!(Vocab::parse("C,Xx").is_err());
        assert!(Vocab::parse("C,C").is_err());
        assert_eq!(Vocab::default().len(), 11);
    }
}
